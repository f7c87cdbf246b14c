"""Similarity-preserving losses over a batch of image and text codes.

With ``C(X, Y)`` the row-cosine matrix and ``S`` the batch slice of the
coherence target:

* ``l_g = sum over C in {C_II, C_TT, C_IT, C_TI} of ||C - S||_F``
* ``l_c = ||diag(C_IT) - 1.5||_2``
* ``l_i = sum over the 6 unordered pairs (C_a, C_b) of ||C_a - C_b||_F``
* ``total = l_c + lambda1 * l_g + lambda2 * l_i``

Gradients are derived by hand through the Frobenius norms, the cosine
products and the row normalization, all in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, NamedTuple

import numpy as np

GRAD_MASKS = ("both", "img_only", "txt_only")
MAT_NAMES = ("II", "TT", "IT", "TI")
ZERO_ROW_EPS = 1e-12


@dataclass(frozen=True)
class LossParams:
    """Loss weights and the variants of the three terms.

    ``coexist_form`` is ``"l2"`` (per-diagonal-entry L2) or ``"trace"``
    (absolute value of the summed deviations). ``squared`` swaps every
    Frobenius/L2 norm for its square. ``coexist_weight`` only exists to switch
    the coexistence term off for ablations. ``reduction="mean"`` divides every
    term by the batch size, which keeps step sizes bounded when the
    summed norms would overwhelm the learning rate.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    coexist_target: float = 1.5
    eps: float = 1e-12
    coexist_form: str = "l2"
    squared: bool = False
    coexist_weight: float = 1.0
    reduction: str = "sum"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.coexist_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.coexist_form not in ("l2", "trace"):
            raise ValueError(f"unknown coexist_form {self.coexist_form!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


class SimMats(NamedTuple):
    II: np.ndarray
    TT: np.ndarray
    IT: np.ndarray
    TI: np.ndarray


@dataclass
class LossBreakdown:
    l_c: float
    l_g: float
    l_i: float
    total: float
    grad_hi: np.ndarray
    grad_ht: np.ndarray
    # value of every individual norm term, e.g. "g:IT" or "i:II-TT"
    terms: Dict[str, float] = field(default_factory=dict)


def _unit_rows(h: np.ndarray, name: str):
    h = np.asarray(h, dtype=np.float64)
    r = np.sqrt(np.einsum("ij,ij->i", h, h))
    bad = np.flatnonzero(r < ZERO_ROW_EPS)
    if bad.size:
        raise ValueError(f"{name} row {bad[0]} is all zero; its cosine similarities are undefined")
    return h / r[:, None], r


def sim_matrices(h_img, h_txt) -> SimMats:
    h_img = np.asarray(h_img)
    h_txt = np.asarray(h_txt)
    if h_img.shape != h_txt.shape or h_img.ndim != 2:
        raise ValueError(f"code matrices must share an n x d shape, got {h_img.shape} and {h_txt.shape}")
    ni, _ = _unit_rows(h_img, "H_img")
    nt, _ = _unit_rows(h_txt, "H_txt")
    c_it = ni @ nt.T
    return SimMats(II=ni @ ni.T, TT=nt @ nt.T, IT=c_it, TI=c_it.T.copy())


def _norm(a: np.ndarray, params: LossParams) -> float:
    sq = float(np.sum(a * a))
    return sq if params.squared else float(np.sqrt(sq + params.eps))


def _norm_grad(a: np.ndarray, value: float, params: LossParams) -> np.ndarray:
    return 2.0 * a if params.squared else a / value


def loss_g(mats: SimMats, S, params: LossParams = LossParams()) -> float:
    S = np.asarray(S, dtype=np.float64)
    return _reduce(sum(_norm(m - S, params) for m in mats), S.shape[0], params)


def loss_c(c_it, params: LossParams = LossParams()) -> float:
    dev = np.diag(np.asarray(c_it, dtype=np.float64)) - params.coexist_target
    if params.coexist_form == "trace":
        s = float(dev.sum())
        return _reduce(s * s if params.squared else abs(s), dev.size, params)
    return _reduce(_norm(dev, params), dev.size, params)


def loss_i(mats: SimMats, params: LossParams = LossParams()) -> float:
    return _reduce(sum(_norm(a - b, params) for a, b in combinations(mats, 2)), mats[0].shape[0], params)


def _reduce(value: float, n: int, params: LossParams) -> float:
    return value / n if params.reduction == "mean" else value


def total_loss_and_grads(h_img, h_txt, S, params: LossParams = LossParams(),
                         grad_mask: str = "both") -> LossBreakdown:
    """All three losses and the exact gradient of ``total`` w.r.t. the codes.

    ``grad_mask`` names the operands treated as variables; the other one
    (typically a sign-quantized code matrix) is a constant and its gradient
    is returned as zeros.
    """
    if grad_mask not in GRAD_MASKS:
        raise ValueError(f"grad_mask must be one of {GRAD_MASKS}")
    ni, ri = _unit_rows(h_img, "H_img")
    nt, rt = _unit_rows(h_txt, "H_txt")
    if ni.shape != nt.shape:
        raise ValueError(f"code matrices must share a shape, got {ni.shape} and {nt.shape}")
    n = ni.shape[0]
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (n, n):
        raise ValueError(f"S must be {n} x {n}, got {S.shape}")

    c_it = ni @ nt.T
    mats = {"II": ni @ ni.T, "TT": nt @ nt.T, "IT": c_it, "TI": c_it.T}
    grads = {k: np.zeros((n, n)) for k in MAT_NAMES}
    terms: Dict[str, float] = {}

    l_g = 0.0
    for k in MAT_NAMES:
        d = mats[k] - S
        v = _norm(d, params)
        terms[f"g:{k}"] = v
        l_g += v
        if params.lambda1:
            grads[k] += params.lambda1 * _norm_grad(d, v, params)

    l_i = 0.0
    for a, b in combinations(MAT_NAMES, 2):
        d = mats[a] - mats[b]
        v = _norm(d, params)
        terms[f"i:{a}-{b}"] = v
        l_i += v
        if params.lambda2:
            g = params.lambda2 * _norm_grad(d, v, params)
            grads[a] += g
            grads[b] -= g

    dev = np.diag(c_it) - params.coexist_target
    if params.coexist_form == "trace":
        s = float(dev.sum())
        l_c = s * s if params.squared else abs(s)
        g_diag = np.full(n, 2.0 * s if params.squared else np.sign(s))
    else:
        l_c = _norm(dev, params)
        g_diag = _norm_grad(dev, l_c, params)
    terms["c"] = l_c
    if params.coexist_weight:
        grads["IT"][np.diag_indices(n)] += params.coexist_weight * g_diag

    if params.reduction == "mean":
        l_c, l_g, l_i = l_c / n, l_g / n, l_i / n
        for k in MAT_NAMES:
            grads[k] /= n
    total = params.coexist_weight * l_c + params.lambda1 * l_g + params.lambda2 * l_i

    # C_TI is C_IT transposed, so its gradient folds back onto C_IT.
    g_cross = grads["IT"] + grads["TI"].T
    grad_hi = np.zeros_like(ni)
    grad_ht = np.zeros_like(nt)
    if grad_mask in ("both", "img_only"):
        dn = (grads["II"] + grads["II"].T) @ ni + g_cross @ nt
        grad_hi = _through_normalization(dn, ni, ri)
    if grad_mask in ("both", "txt_only"):
        dn = (grads["TT"] + grads["TT"].T) @ nt + g_cross.T @ ni
        grad_ht = _through_normalization(dn, nt, rt)
    return LossBreakdown(l_c=l_c, l_g=l_g, l_i=l_i, total=total,
                         grad_hi=grad_hi, grad_ht=grad_ht, terms=terms)


def _through_normalization(dn: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(x/|x|)/dx = (I - u u^T) / |x|
    radial = np.einsum("ij,ij->i", dn, unit)
    return (dn - unit * radial[:, None]) / norms[:, None]
