"""Small feed-forward networks: evaluation, reverse-mode gradients, L1 Lipschitz
bounds, interval bound propagation and a bit-exact binary weight format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels

HEADS = ("identity", "softplus", "tanh")
MAGIC = b"CLPSNET\x00"
VERSION = 1


class CorruptNetError(ValueError):
    pass


class NetVersionError(ValueError):
    pass


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Mlp:
    """ReLU network; ``weights[l]`` has shape (out, in).

    ``head`` is applied to the last affine layer: ``identity``, ``softplus``
    (certificates, nonnegative output) or ``tanh`` scaled to ``[out_lo, out_hi]``
    (policies, output always inside the action box).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "identity"
    out_lo: np.ndarray | None = None
    out_hi: np.ndarray | None = None

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        self.weights = [np.array(W, dtype=np.float64, ndmin=2) for W in self.weights]
        self.biases = [np.array(b, dtype=np.float64, ndmin=1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: bias length {b.shape[0]} != rows {W.shape[0]}")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input width {W.shape[1]} does not match")
        if self.head == "tanh":
            if self.out_lo is None or self.out_hi is None:
                raise ValueError("tanh head needs an output box")
            self.out_lo = np.array(self.out_lo, dtype=np.float64, ndmin=1)
            self.out_hi = np.array(self.out_hi, dtype=np.float64, ndmin=1)
            if self.out_lo.shape != (self.out_dim,) or np.any(self.out_hi < self.out_lo):
                raise ValueError("output box does not match the last layer")
        else:
            self.out_lo = self.out_hi = None

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [W.shape[0] for W in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.head,
                   None if self.out_lo is None else self.out_lo.copy(),
                   None if self.out_hi is None else self.out_hi.copy())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())

    @property
    def _half(self):
        return 0.5 * (self.out_hi - self.out_lo)

    @property
    def _mid(self):
        return 0.5 * (self.out_hi + self.out_lo)

    def _head(self, z):
        if self.head == "softplus":
            return softplus(z)
        if self.head == "tanh":
            return self._mid + self._half * np.tanh(z)
        return z

    def __call__(self, x):
        return forward(self, x)


def init_mlp(sizes, head: str = "identity", rng: np.random.Generator | None = None,
             out_lo=None, out_hi=None, out_scale: float = 1.0) -> Mlp:
    """He-uniform hidden layers; the last layer is scaled by ``out_scale``."""
    rng = rng or np.random.default_rng(0)
    Ws, bs = [], []
    for l in range(len(sizes) - 1):
        fan_in = sizes[l]
        lim = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-lim, lim, size=(sizes[l + 1], fan_in))
        if l == len(sizes) - 2:
            W *= out_scale
        Ws.append(W)
        bs.append(np.zeros(sizes[l + 1]))
    return Mlp(Ws, bs, head, out_lo, out_hi)


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate on one state (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != net.in_dim:
        from .spectrl import DimensionError

        raise DimensionError(f"input dimension {h.shape[1]}, network expects {net.in_dim}")
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W.T + b
        if l < last:
            h = np.maximum(h, 0.0)
    y = net._head(h)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each affine layer
    pre: list[np.ndarray] = field(default_factory=list)      # affine outputs
    out: np.ndarray | None = None


def forward_tape(net: Mlp, x) -> Tape:
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tape = Tape()
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        tape.inputs.append(h)
        z = h @ W.T + b
        tape.pre.append(z)
        h = np.maximum(z, 0.0) if l < last else z
    tape.out = net._head(h)
    return tape


def backward(net: Mlp, tape: Tape, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse pass. Returns (gradients in ``params()`` order, gradient w.r.t. the input)."""
    g = np.asarray(grad_out, dtype=np.float64).reshape(tape.out.shape)
    z = tape.pre[-1]
    if net.head == "softplus":
        g = g * sigmoid(z)
    elif net.head == "tanh":
        g = g * net._half * (1.0 - np.tanh(z) ** 2)
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for l in range(len(net.weights) - 1, -1, -1):
        if l < len(net.weights) - 1:
            g = g * (tape.pre[l] > 0)
        grads[2 * l] = g.T @ tape.inputs[l]
        grads[2 * l + 1] = g.sum(axis=0)
        g = g @ net.weights[l]
    return grads, g


def backprop(net: Mlp, loss_fn, x) -> tuple[float, list[np.ndarray]]:
    """``loss_fn(outputs) -> (scalar loss, d loss / d outputs)``; returns loss and parameter gradients."""
    tape = forward_tape(net, x)
    loss, dout = loss_fn(tape.out)
    grads, _ = backward(net, tape, dout)
    return float(loss), grads


# ---------------------------------------------------------------------------
# Lipschitz bound and interval propagation
# ---------------------------------------------------------------------------

def layer_norms(net: Mlp) -> list[float]:
    """Per-layer L1 operator norms (max column absolute sums), head slope folded in."""
    norms = []
    last = len(net.weights) - 1
    for l, W in enumerate(net.weights):
        A = np.abs(W)
        if l == last and net.head == "tanh":
            A = A * net._half[:, None]
        norms.append(float(A.sum(axis=0).max()) if A.size else 0.0)
    return norms


def lipschitz_bound(net: Mlp) -> float:
    """Upper bound on the L1 -> L1 Lipschitz constant.

    ReLU, softplus and tanh have slope at most 1, so the product of layer norms
    bounds the whole map.
    """
    return float(np.prod(layer_norms(net)))


def lipschitz_grad(net: Mlp) -> tuple[float, list[np.ndarray]]:
    """The product bound and a subgradient in ``params()`` order (biases get zero)."""
    norms = layer_norms(net)
    total = float(np.prod(norms))
    grads = []
    last = len(net.weights) - 1
    for l, W in enumerate(net.weights):
        A = np.abs(W)
        scale = net._half[:, None] if (l == last and net.head == "tanh") else 1.0
        cols = (A * scale).sum(axis=0)
        j = int(np.argmax(cols))
        others = float(np.prod([n for k, n in enumerate(norms) if k != l]))
        gW = np.zeros_like(W)
        gW[:, j] = np.sign(W[:, j]) * (scale[:, 0] if np.ndim(scale) else scale) * others
        grads += [gW, np.zeros_like(net.biases[l])]
    return total, grads


def local_lipschitz(net: Mlp, lo, hi) -> np.ndarray:
    """L1 -> L1 Lipschitz bounds of ``net`` restricted to each box ``[lo, hi]``.

    The Jacobian on a box is bounded entrywise by ``|W_L| D_{L-1} ... D_1 |W_1|``
    where ``D_l`` keeps the units whose pre-activation can be positive on the
    box (interval propagation decides this), scaled by the largest head slope
    over the box. Never larger than :func:`lipschitz_bound`.
    """
    lo = np.atleast_2d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_2d(np.asarray(hi, dtype=np.float64))
    n = lo.shape[0]
    last = len(net.weights) - 1
    P = np.broadcast_to(np.abs(net.weights[0]), (n,) + net.weights[0].shape)
    zl, zh = lo, hi
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        zl, zh = _kernels.interval_affine(zl, zh, W, b)
        if l > 0:
            P = np.einsum("oi,nid->nod", np.abs(W), P)
        if l < last:
            P = P * (zh > 0)[:, :, None]
            zl, zh = np.maximum(zl, 0.0), np.maximum(zh, 0.0)
    if net.head == "softplus":
        P = P * sigmoid(zh)[:, :, None]
    elif net.head == "tanh":
        closest = np.where((zl <= 0) & (zh >= 0), 0.0, np.minimum(np.abs(zl), np.abs(zh)))
        P = P * (net._half * (1.0 - np.tanh(closest) ** 2))[:, :, None]
    out = P.sum(axis=1).max(axis=1) * (1.0 + 1e-12)
    return np.minimum(out, lipschitz_bound(net) * (1.0 + 1e-12))


def _outward(lo, hi):
    return np.nextafter(lo, -np.inf), np.nextafter(hi, np.inf)


def ibp_forward(net: Mlp, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Sound output enclosure for inputs in the boxes ``[lo, hi]`` (batched or single)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    single = lo.ndim == 1
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    if np.any(hi < lo):
        raise ValueError("interval lower bound exceeds upper bound")
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        lo, hi = _kernels.interval_affine(lo, hi, W, b)
        if l < last:
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
    if net.head != "identity":
        lo, hi = _outward(net._head(lo), net._head(hi))
        if net.head == "softplus":
            lo = np.maximum(lo, 0.0)
        else:
            lo, hi = np.maximum(lo, net.out_lo), np.minimum(hi, net.out_hi)
    return (lo[0], hi[0]) if single else (lo, hi)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def net_bytes(net: Mlp) -> bytes:
    parts = [MAGIC, struct.pack("<III", VERSION, HEADS.index(net.head), len(net.weights))]
    for W in net.weights:
        parts.append(struct.pack("<II", *W.shape))
    for W, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    if net.head == "tanh":
        parts.append(np.ascontiguousarray(net.out_lo, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(net.out_hi, dtype="<f8").tobytes())
    return b"".join(parts)


def net_from_bytes(blob: bytes) -> Mlp:
    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CorruptNetError("weight file is truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(len(MAGIC)) != MAGIC:
        raise CorruptNetError("bad magic bytes; not a network file")
    version, head, nlayers = struct.unpack("<III", take(12))
    if version != VERSION:
        raise NetVersionError(f"weight file version {version}, expected {VERSION}")
    if head >= len(HEADS) or not 0 < nlayers < 1024:
        raise CorruptNetError("corrupt header")
    dims = [struct.unpack("<II", take(8)) for _ in range(nlayers)]
    Ws, bs = [], []
    for r, c in dims:
        Ws.append(np.frombuffer(take(8 * r * c), dtype="<f8").reshape(r, c).astype(np.float64))
        bs.append(np.frombuffer(take(8 * r), dtype="<f8").astype(np.float64))
    lo = hi = None
    if HEADS[head] == "tanh":
        m = dims[-1][0]
        lo = np.frombuffer(take(8 * m), dtype="<f8").astype(np.float64)
        hi = np.frombuffer(take(8 * m), dtype="<f8").astype(np.float64)
    if pos != len(blob):
        raise CorruptNetError("trailing bytes after network payload")
    try:
        return Mlp(Ws, bs, HEADS[head], lo, hi)
    except ValueError as exc:
        raise CorruptNetError(str(exc)) from exc


def save_net(net: Mlp, path) -> None:
    from .artifacts import atomic_write_bytes

    atomic_write_bytes(Path(path), net_bytes(net))


def load_net(path) -> Mlp:
    return net_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
