"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient.  Outside a tape (or inside :func:`no_grad`) the
same functions just compute values, which is how teacher forwards and
finite-difference probes run.

    >>> params = ParameterSet()
    >>> w = params.add("w", np.array([[1.0, 2.0]]))
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(w, w))
    >>> backward(tape, loss)
    >>> w.grad
    array([[2., 4.]])
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ParameterSet", "no_grad", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape", "slice_cols",
    "relu", "exp", "log", "power", "square", "sum_all", "mean_all", "mean_axis",
    "softmax_rows", "log_softmax_rows", "layer_norm", "l2_norm", "concat",
    "gather_rows", "scatter_rows", "segment_max", "block_mean", "block_upsample",
    "mlp_apply", "init_mlp", "finite_diff_check", "kink_margin", "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("_data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        # arithmetic on 0-d arrays yields numpy scalars; keep a real array
        self._data = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_TAPES: list["Tape | None"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Execution order is a valid topological order, so the backward sweep is
    a plain reversed replay.  ``kink_margin`` tracks how close any ramp
    pre-activation or segment-max runner-up came to a non-differentiable
    point; finite-difference checks are only meaningful when it is well
    above the probe step.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.kink_margin = np.inf

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def note_kink(self, margin: float) -> None:
        if margin < self.kink_margin:
            self.kink_margin = float(margin)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, e.g. for the teacher forward inside a training step."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> None:
    """Fill ``.grad`` of every tensor reachable from ``loss`` on ``tape``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        node.backward_fn(g)


# ---------------------------------------------------------------------------
# element-wise arithmetic (numpy broadcasting rules)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / b.data**2, b.shape))

    return _make(a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: _accumulate(a, g * out_data))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def power(a: Tensor, p: float) -> Tensor:
    """``a ** p`` for a constant exponent; the derivative at 0 is taken as 0 when p > 1."""
    def bw(g):
        if p == 0:
            return
        _accumulate(a, g * p * np.power(a.data, p - 1))

    return _make(np.power(a.data, p), (a,), bw)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: _accumulate(a, 2.0 * g * a.data))


def relu(a: Tensor) -> Tensor:
    tape = _active_tape()
    if tape is not None and a.requires_grad and a.data.size:
        tape.note_kink(np.min(np.abs(a.data)))
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: _accumulate(a, g * mask))


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: _accumulate(a, g.T))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        _accumulate(a, ga)

    return _make(a.data[..., start:stop], (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(old)))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.sum(a.data), (a,), lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


def mean_all(a: Tensor) -> Tensor:
    n = max(a.data.size, 1)
    return _make(np.sum(a.data) / n, (a,),
                 lambda g: _accumulate(a, np.broadcast_to(g / n, a.shape)))


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]

    def bw(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.shape))

    return _make(a.data.mean(axis=axis), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accumulate(a, ga)

    return _make(a.data[idx], (a,), bw)


def scatter_rows(a: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Rows of ``a`` summed into row ``idx[i]`` of a zero ``n_rows``-row array."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) != a.shape[0]:
        raise ValueError(f"scatter index length {len(idx)} != rows {a.shape[0]}")
    if len(idx) and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError("scatter index out of bounds")
    out = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out, idx, a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g[idx]))


def segment_max(a: Tensor, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Column-wise maximum of the rows in each segment; empty segments give zeros.

    Ties route the gradient to the lowest row index.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    n, d = a.shape
    out = np.zeros((n_segments, d))
    winner = np.zeros((n_segments, d), dtype=np.int64)
    if n == 0:
        return _make(out, (a,), lambda g: None)
    order = np.argsort(seg, kind="stable")
    seg_sorted = seg[order]
    x = a.data[order]
    starts = np.flatnonzero(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]])
    present = seg_sorted[starts]
    top = np.maximum.reduceat(x, starts, axis=0)
    counts = np.diff(np.r_[starts, n])
    top_rows = np.repeat(top, counts, axis=0)
    rows = np.broadcast_to(np.arange(n)[:, None], (n, d))
    cand = np.where(x == top_rows, rows, n)
    first = np.minimum.reduceat(cand, starts, axis=0)
    out[present] = top
    winner[present] = order[first]

    tape = _active_tape()
    if tape is not None and a.requires_grad:
        multi = counts > 1
        if multi.any():
            masked = x.copy()
            masked[first, np.arange(d)[None, :]] = -np.inf
            second = np.maximum.reduceat(masked, starts, axis=0)
            tape.note_kink(np.min((top - second)[multi]))

    def bw(g):
        ga = np.zeros_like(a.data)
        cols = np.broadcast_to(np.arange(d), (len(present), d))
        np.add.at(ga, (winner[present], cols), g[present])
        _accumulate(a, ga)

    return _make(out, (a,), bw)


def _blocked(shape: tuple[int, int, int], factors: tuple[int, int, int], c: int):
    (r, t, h), (fr, ft, fh) = shape, factors
    return (r // fr, fr, t // ft, ft, h // fh, fh, c)


def block_mean(a: Tensor, grid_shape, factors, theta_shift: int = 0) -> Tensor:
    """Average non-overlapping (radial, azimuth, height) blocks of a flat grid.

    ``a`` has one row per cell of ``grid_shape`` in C order.  The azimuth
    axis is periodic: ``theta_shift`` rotates the block phase so that a
    block may straddle the -pi/pi seam.
    """
    grid_shape, factors = tuple(grid_shape), tuple(factors)
    c = a.shape[1]
    size = int(np.prod(factors))
    coarse = tuple(s // f for s, f in zip(grid_shape, factors))
    x = a.data.reshape(grid_shape + (c,))
    if theta_shift:
        x = np.roll(x, -theta_shift, axis=1)
    out = x.reshape(_blocked(grid_shape, factors, c)).mean(axis=(1, 3, 5)).reshape(-1, c)

    def bw(g):
        gb = np.broadcast_to(g.reshape(coarse[0], 1, coarse[1], 1, coarse[2], 1, c) / size,
                             _blocked(grid_shape, factors, c)).reshape(grid_shape + (c,))
        if theta_shift:
            gb = np.roll(gb, theta_shift, axis=1)
        _accumulate(a, gb.reshape(-1, c))

    return _make(out, (a,), bw)


def block_upsample(a: Tensor, coarse_shape, factors, theta_shift: int = 0) -> Tensor:
    """Nearest-neighbour inverse of :func:`block_mean`'s cell layout."""
    coarse_shape, factors = tuple(coarse_shape), tuple(factors)
    c = a.shape[1]
    fine = tuple(s * f for s, f in zip(coarse_shape, factors))
    x = a.data.reshape(coarse_shape[0], 1, coarse_shape[1], 1, coarse_shape[2], 1, c)
    up = np.broadcast_to(x, _blocked(fine, factors, c)).reshape(fine + (c,))
    if theta_shift:
        up = np.roll(up, theta_shift, axis=1)

    def bw(g):
        gg = g.reshape(fine + (c,))
        if theta_shift:
            gg = np.roll(gg, -theta_shift, axis=1)
        _accumulate(a, gg.reshape(_blocked(fine, factors, c)).sum(axis=(1, 3, 5)).reshape(-1, c))

    return _make(up.reshape(-1, c), (a,), bw)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(a, s * (g - np.sum(g * s, axis=-1, keepdims=True)))

    return _make(s, (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        _accumulate(a, g - s * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation followed by a learned affine map."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            _accumulate(a, inv * (gx - gx.mean(axis=-1, keepdims=True)
                                  - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(xhat * gain.data + bias.data, (a, gain, bias), bw)


def l2_norm(a: Tensor) -> Tensor:
    """Frobenius norm; the subgradient at the origin is taken as zero."""
    nrm = float(np.sqrt(np.sum(a.data * a.data)))

    def bw(g):
        if nrm > 0:
            _accumulate(a, g * a.data / nrm)

    return _make(np.array(nrm), (a,), bw)


# ---------------------------------------------------------------------------
# parameters and MLPs
# ---------------------------------------------------------------------------

class ParameterSet:
    """Named trainable tensors, keyed by slash-separated paths.

    Names are kept in insertion order, which fixes the order of optimizer
    updates and checkpoint records.
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self._t[name] = t

    def add(self, name: str, value) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def names(self) -> list[str]:
        return list(self._t)

    def items(self):
        return self._t.items()

    def with_prefix(self, prefix: str) -> list[str]:
        return [n for n in self._t if n.startswith(prefix)]

    def mlp(self, prefix: str) -> list[tuple[Tensor, Tensor]]:
        layers = []
        i = 0
        while f"{prefix}/l{i}/w" in self._t:
            layers.append((self._t[f"{prefix}/l{i}/w"], self._t[f"{prefix}/l{i}/b"]))
            i += 1
        if not layers:
            raise KeyError(f"no MLP under {prefix!r}")
        return layers

    def copy(self, requires_grad: bool = True) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self._t.items():
            out._t[name] = Tensor(t.data.copy(), requires_grad=requires_grad)
        return out

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self._t.items()}

    def num_values(self) -> int:
        return sum(t.data.size for t in self._t.values())

    def same_layout(self, other: "ParameterSet") -> bool:
        return (self.names() == other.names()
                and all(self[n].shape == other[n].shape for n in self._t))


def init_mlp(params: ParameterSet, prefix: str, sizes: Sequence[int],
             rng: np.random.Generator) -> None:
    """He-normal weights, zero biases, for layer widths ``sizes``."""
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.add(f"{prefix}/l{i}/w", rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
        params.add(f"{prefix}/l{i}/b", np.zeros(fan_out))


def mlp_apply(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]],
              activation: Callable[[Tensor], Tensor] = relu) -> Tensor:
    """Affine layers with ``activation`` between them; the last layer stays affine."""
    for i, (w, b) in enumerate(layers):
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"layer {i}: input width {x.shape[-1]} != weight rows {w.shape[0]}")
        x = add(matmul(x, w), b)
        if i < len(layers) - 1:
            x = activation(x)
    return x


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[ParameterSet], Tensor], params: ParameterSet,
                      h: float = 1e-5, eps: float = 1e-6,
                      names: Sequence[str] | None = None) -> float:
    """Largest relative disagreement between taped and central-difference gradients.

    The error per element is ``|a - n| / (|a| + |n| + eps)``; ``eps`` keeps
    elements whose true gradient is zero from dividing rounding noise by
    nothing.
    """
    params.zero_grad()
    with Tape() as tape:
        loss = f(params)
    backward(tape, loss)
    worst = 0.0
    for name in (names if names is not None else params.names()):
        t = params[name]
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = f(params).item()
            flat[i] = keep - h
            fm = f(params).item()
            flat[i] = keep
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
            worst = max(worst, err)
    return worst


def kink_margin(f: Callable[[ParameterSet], Tensor], params: ParameterSet) -> float:
    """Distance of the nearest ramp/max kink on the taped forward of ``f``."""
    with Tape() as tape:
        f(params)
    return tape.kink_margin


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HILO"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParameterSet) -> None:
    """Write ``params`` as: magic, u32 version, then per tensor
    u32 name length, utf-8 name, u32 rank, u64 dims, little-endian f64 values."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a HILO checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    params = ParameterSet()
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise ValueError(f"{path}: truncated record {name!r} at byte {pos}")
            values = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            params.add(name, values.astype(np.float64))
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint at byte {pos}") from exc
    return params
