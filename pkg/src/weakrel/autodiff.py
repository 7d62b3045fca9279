"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only the handful of operations needed by the relational predicate classifier
are provided. Every operation appends one node to a :class:`Tape`; calling
:func:`backward` walks the tape in reverse and returns gradients for the
named leaves (parameters and raw graph inputs alike).

Operations accept batched inputs where that is cheap (rows of vectors for
``linear``, a leading batch axis for ``conv3x3``) so that many graphs can be
processed in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

POOL_MODES = ("max", "mean", "sum")
BCE_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """A variable was used with a tape it does not belong to."""


class Var:
    """A value recorded on a tape."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data: np.ndarray, tape: "Tape", index: int):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape}, index={self.index})"


@dataclass
class _Node:
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple] | None


class Tape:
    """Ordered record of a single forward pass.

    Nodes are appended in execution order, so the record is topologically
    sorted by construction.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self.leaves: dict[str, int] = {}
        self.leaf_shapes: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, name: str, value) -> Var:
        """Register a named differentiable input."""
        if name in self.leaves:
            raise TapeError(f"leaf {name!r} already registered")
        data = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError(f"leaf {name!r} has non-finite entries")
        var = self._record(data, (), None)
        self.leaves[name] = var.index
        self.leaf_shapes[name] = data.shape
        return var

    def constant(self, value) -> Var:
        """Record a value that is never differentiated."""
        return self._record(np.array(value, dtype=np.float64), (), None)

    def _record(self, data: np.ndarray, inputs: tuple[Var, ...], backward) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise TapeError("operand belongs to a different tape")
        self._nodes.append(_Node(tuple(v.index for v in inputs), backward))
        return Var(data, self, len(self._nodes) - 1)


def _tape_of(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise TapeError("operands belong to different tapes")
    return tape


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def linear(x: Var, W: Var, b: Var | None = None) -> Var:
    """``y = x W^T + b`` for a vector ``x`` of shape (n,) or rows (m, n)."""
    tape = _tape_of(x, W) if b is None else _tape_of(x, W, b)
    if W.data.ndim != 2:
        raise ShapeError(f"linear: W must be 2-D, got shape {W.shape}")
    m, n = W.shape
    if x.data.ndim not in (1, 2) or x.shape[-1] != n:
        raise ShapeError(f"linear: x must have trailing dimension {n}, got shape {x.shape}")
    if b is not None and b.shape != (m,):
        raise ShapeError(f"linear: b must have shape ({m},), got {b.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        if xd.ndim == 1:
            gW = np.outer(g, xd)
            gb = g
        else:
            gW = g.T @ xd
            gb = g.sum(axis=0)
        gx = g @ Wd
        return (gx, gW) if b is None else (gx, gW, gb)

    inputs = (x, W) if b is None else (x, W, b)
    return tape._record(out, inputs, backward)


def relu(x: Var) -> Var:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return x.tape._record(out, (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Var) -> Var:
    y = _sigmoid(np.asarray(x.data, dtype=np.float64).reshape(x.shape))
    return x.tape._record(y, (x,), lambda g: (g * y * (1.0 - y),))


def conv3x3(x: Var, kernels: Var, bias: Var) -> Var:
    """Same-size 3x3 cross-correlation, zero padding 1, stride 1.

    ``x`` is (c_in, h, w) or batched (B, c_in, h, w).
    """
    tape = _tape_of(x, kernels, bias)
    if kernels.data.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3: kernels must be (c_out, c_in, 3, 3), got {kernels.shape}")
    c_out, c_in = kernels.shape[:2]
    if bias.shape != (c_out,):
        raise ShapeError(f"conv3x3: bias must have shape ({c_out},), got {bias.shape}")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise ShapeError(f"conv3x3: input must have {c_in} channels, got shape {x.shape}")
    B, _, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.stack(
        [xp[:, :, di : di + h, dj : dj + w] for di in range(3) for dj in range(3)], axis=2
    )  # (B, c_in, 9, h, w)
    kr = kernels.data.reshape(c_out, c_in, 9)
    out = np.einsum("bcthw,oct->bohw", cols, kr, optimize=True) + bias.data[None, :, None, None]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gk = np.einsum("bohw,bcthw->oct", g4, cols, optimize=True).reshape(kernels.shape)
        gb = g4.sum(axis=(0, 2, 3))
        gcols = np.einsum("bohw,oct->bcthw", g4, kr, optimize=True)
        gxp = np.zeros_like(xp)
        for t in range(9):
            di, dj = divmod(t, 3)
            gxp[:, :, di : di + h, dj : dj + w] += gcols[:, :, t]
        gx = gxp[:, :, 1:-1, 1:-1]
        return (gx[0] if single else gx, gk, gb)

    return tape._record(out, (x, kernels, bias), backward)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    if not parts:
        raise ShapeError("concat: empty list of parts")
    tape = _tape_of(*parts)
    ndim = parts[0].data.ndim
    for p in parts:
        if p.data.ndim != ndim:
            raise ShapeError(f"concat: mixed ranks {[q.shape for q in parts]}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape._record(out, tuple(parts), backward)


def reshape(x: Var, shape: tuple[int, ...]) -> Var:
    src = x.shape
    out = x.data.reshape(shape)
    return x.tape._record(out, (x,), lambda g: (g.reshape(src),))


def gather_rows(x: Var, index: np.ndarray) -> Var:
    """Select rows ``x[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    out = x.data[index]
    n = x.shape[0]

    def backward(g):
        gx = np.zeros((n,) + g.shape[1:])
        np.add.at(gx, index, g)
        return (gx,)

    return x.tape._record(out, (x,), backward)


def scale(x: Var, c: float) -> Var:
    c = float(c)
    return x.tape._record(x.data * c, (x,), lambda g: (g * c,))


def stack(vectors: Sequence[Var]) -> Var:
    """Stack equal-length 1-D vectors into rows."""
    if not vectors:
        raise ShapeError("stack: empty list")
    rows = [reshape(v, (1,) + v.shape) for v in vectors]
    return concat(rows, axis=0)


def segment_pool(x: Var, counts, mode: str = "max") -> Var:
    """Pool consecutive row segments of ``x`` (E, d) into (G, d).

    ``counts[g]`` rows belong to segment ``g``. Empty segments pool to the
    zero vector. For ``max`` the gradient goes to the first row attaining the
    maximum in each coordinate.
    """
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")
    counts = np.asarray(counts, dtype=np.intp)
    if x.data.ndim != 2:
        raise ShapeError(f"segment_pool: x must be 2-D, got {x.shape}")
    E, d = x.shape
    if counts.sum() != E:
        raise ShapeError(f"segment_pool: counts sum to {counts.sum()}, x has {E} rows")
    G = len(counts)
    nonempty = counts > 0
    starts = (np.cumsum(counts) - counts)[nonempty]
    seg_of_row = np.repeat(np.arange(G), counts)
    out = np.zeros((G, d))
    first = None
    if E:
        if mode == "max":
            red = np.maximum.reduceat(x.data, starts, axis=0)
        else:
            red = np.add.reduceat(x.data, starts, axis=0)
            if mode == "mean":
                red = red / counts[nonempty, None]
        out[nonempty] = red
        if mode == "max":
            hit = x.data == out[seg_of_row]
            cand = np.where(hit, np.arange(E)[:, None], E)
            first = np.minimum.reduceat(cand, starts, axis=0)

    def backward(g):
        if mode == "sum":
            return (g[seg_of_row],)
        if mode == "mean":
            return (g[seg_of_row] / counts[seg_of_row, None],)
        gx = np.zeros((E, d))
        if E:
            gx[first, np.arange(d)[None, :]] = g[nonempty]
        return (gx,)

    return x.tape._record(out, (x,), backward)


def pool_set(vectors: Sequence[Var] | Var, mode: str = "max") -> Var:
    """Permutation-invariant reduction of a non-empty set of equal-length vectors."""
    x = vectors if isinstance(vectors, Var) else stack(list(vectors))
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("pool_set: needs a non-empty set of vectors")
    pooled = segment_pool(x, [x.shape[0]], mode)
    return reshape(pooled, (x.shape[1],))


def bce_loss(y: Var, p) -> Var:
    """Summed binary cross-entropy ``-sum p log y + (1-p) log(1-y)``.

    ``y`` is clamped to ``[eps, 1-eps]``; the gradient is evaluated at the
    clamped value.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: labels shape {p.shape} != predictions shape {y.shape}")
    if not np.all((p == 0) | (p == 1)):
        raise ValueError("bce_loss: labels must be binary")
    yc = np.clip(y.data, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.sum(p * np.log(yc) + (1.0 - p) * np.log(1.0 - yc))
    dy = -p / yc + (1.0 - p) / (1.0 - yc)
    return y.tape._record(np.array(loss), (y,), lambda g: (g * dy,))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, output: Var, seed=None, index=None) -> dict[str, np.ndarray]:
    """Gradients of ``output`` with respect to every named leaf of ``tape``.

    ``output`` must be a scalar unless ``index`` selects one component or
    ``seed`` supplies the upstream gradient explicitly. Leaves that do not
    influence the output receive zero arrays.
    """
    if output.tape is not tape or output.index >= len(tape._nodes):
        raise TapeError("output was not produced on this tape")
    if seed is not None:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")
    elif index is not None:
        seed = np.zeros(output.shape)
        seed[index] = 1.0
    elif output.data.size == 1:
        seed = np.ones(output.shape)
    else:
        raise ShapeError("backward: non-scalar output needs an index or a seed")

    grads: list[np.ndarray | None] = [None] * (output.index + 1)
    grads[output.index] = seed
    nodes = tape._nodes
    for i in range(output.index, -1, -1):
        g = grads[i]
        if g is None or nodes[i].backward is None:
            continue
        for j, gj in zip(nodes[i].inputs, nodes[i].backward(g)):
            if gj is None:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj

    out = {}
    for name, idx in tape.leaves.items():
        g = grads[idx] if idx <= output.index else None
        out[name] = np.zeros(tape.leaf_shapes[name]) if g is None else g
    return out


# ---------------------------------------------------------------------------
# parameters and optimization
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 2:
        fan_out, fan_in = shape
    else:
        receptive = int(np.prod(shape[2:]))
        fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with coupled L2 weight decay; inputs are not modified."""
    if not np.isfinite(lr) or lr < 0:
        raise ValueError(f"learning rate must be a finite non-negative number, got {lr}")
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, expected {w.shape}")
        if weight_decay:
            g = g + weight_decay * w
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)
