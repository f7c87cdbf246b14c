"""Two-layer hashing network with hand-written backward pass and momentum SGD.

``H = tanh(scale * (relu(F @ w1.T + b1) @ w2.T + b2))``. One instance per
modality; only these layers are trained, feature extractors stay external.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

PARAM_NAMES = ("w1", "b1", "w2", "b2")
_ONE_BELOW = np.nextafter(1.0, 0.0)

CKPT_MAGIC = b"GCPN"
_CKPT_HEADER = struct.Struct("<4sIII")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class SgdConfig:
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch: int = 32
    epochs: int = 100

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class HashNet:
    w1: np.ndarray  # hidden x d_in
    b1: np.ndarray  # hidden
    w2: np.ndarray  # d_bits x hidden
    b2: np.ndarray  # d_bits
    hidden_act: str = "relu"
    output_scale: float = 1.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        hidden, d_in = self.w1.shape
        d_bits = self.w2.shape[0]
        if self.b1.shape != (hidden,) or self.w2.shape != (d_bits, hidden) or self.b2.shape != (d_bits,):
            raise ValueError("inconsistent parameter shapes")
        if self.hidden_act not in ("relu", "tanh"):
            raise ValueError(f"unknown hidden activation {self.hidden_act!r}")
        if not self.velocity:
            self.velocity = {n: np.zeros_like(getattr(self, n)) for n in PARAM_NAMES}

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def d_bits(self) -> int:
        return self.w2.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "HashNet":
        return HashNet(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            hidden_act=self.hidden_act, output_scale=self.output_scale,
            velocity={k: v.copy() for k, v in self.velocity.items()},
        )


@dataclass
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    h: np.ndarray


def init_net(d_in: int, hidden: int, d_bits: int, seed: int = 0, *,
             hidden_act: str = "relu", output_scale: float = 1.0,
             dtype=np.float64) -> HashNet:
    """Glorot-uniform weights, zero biases, zero momentum."""
    if min(d_in, hidden, d_bits) < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (d_in + hidden))
    lim2 = np.sqrt(6.0 / (hidden + d_bits))
    w1 = rng.uniform(-lim1, lim1, size=(hidden, d_in)).astype(dtype)
    w2 = rng.uniform(-lim2, lim2, size=(d_bits, hidden)).astype(dtype)
    return HashNet(w1, np.zeros(hidden, dtype), w2, np.zeros(d_bits, dtype),
                   hidden_act=hidden_act, output_scale=output_scale)


def forward(net: HashNet, F) -> Tuple[np.ndarray, ForwardCache]:
    x = np.asarray(F, dtype=net.w1.dtype)
    if x.ndim != 2 or x.shape[1] != net.d_in:
        raise ValueError(f"expected n x {net.d_in} input, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite input features")
    with np.errstate(over="ignore", invalid="ignore"):
        z1 = x @ net.w1.T + net.b1
        a1 = np.maximum(z1, 0.0) if net.hidden_act == "relu" else np.tanh(z1)
        z2 = a1 @ net.w2.T + net.b2
    h = np.clip(np.tanh(net.output_scale * z2), -_ONE_BELOW, _ONE_BELOW)
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("non-finite network output; parameters have diverged")
    return h, ForwardCache(x=x, z1=z1, a1=a1, h=h)


def backward(net: HashNet, cache: ForwardCache, grad_h) -> Dict[str, np.ndarray]:
    """Parameter gradients given dLoss/dH."""
    g = np.asarray(grad_h, dtype=net.w1.dtype)
    dz2 = g * (1.0 - cache.h ** 2) * net.output_scale
    gw2 = dz2.T @ cache.a1
    gb2 = dz2.sum(axis=0)
    da1 = dz2 @ net.w2
    if net.hidden_act == "relu":
        dz1 = da1 * (cache.z1 > 0)
    else:
        dz1 = da1 * (1.0 - cache.a1 ** 2)
    gw1 = dz1.T @ cache.x
    gb1 = dz1.sum(axis=0)
    return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}


def apply_grads(net: HashNet, grads: Dict[str, np.ndarray], cfg: SgdConfig) -> None:
    """In-place momentum SGD step with L2 weight decay.

    ``v = momentum * v + grad + weight_decay * param``; ``param -= lr * v``.
    Nothing is modified if any gradient is non-finite.
    """
    for name in PARAM_NAMES:
        g = grads[name]
        if g.shape != getattr(net, name).shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; update aborted")
    for name in PARAM_NAMES:
        p = getattr(net, name)
        v = net.velocity[name]
        v *= cfg.momentum
        v += grads[name]
        if cfg.weight_decay:
            v += cfg.weight_decay * p
        p -= cfg.lr * v


def save_checkpoint(net: HashNet, path: Union[str, os.PathLike]) -> None:
    """``GCPN`` magic, u32 d_in/hidden/d_bits, then w1, b1, w2, b2 as f32 LE."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, net.d_in, net.hidden, net.d_bits))
            for name in PARAM_NAMES:
                fh.write(np.ascontiguousarray(getattr(net, name), dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Union[str, os.PathLike], d_in: Optional[int] = None,
                    d_bits: Optional[int] = None, dtype=np.float64) -> HashNet:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC or len(raw) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: not a checkpoint file")
    _, n_in, hidden, n_bits = _CKPT_HEADER.unpack_from(raw)
    if d_in is not None and n_in != d_in:
        raise ValueError(f"{path}: checkpoint expects d_in={n_in}, got {d_in}")
    if d_bits is not None and n_bits != d_bits:
        raise ValueError(f"{path}: checkpoint has d_bits={n_bits}, expected {d_bits}")
    shapes = {"w1": (hidden, n_in), "b1": (hidden,), "w2": (n_bits, hidden), "b2": (n_bits,)}
    count = sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != _CKPT_HEADER.size + 4 * count:
        raise ValueError(f"{path}: payload size disagrees with header dimensions")
    off = _CKPT_HEADER.size
    params = {}
    for name in PARAM_NAMES:
        n = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(raw, "<f4", n, off).reshape(shapes[name]).astype(dtype)
        off += 4 * n
    return HashNet(**params)
