"""Dense float32 tensors with tape-based reverse-mode differentiation.

Ops execute eagerly on numpy buffers. While a Tape is active, every op
appends a backward closure; traversing the tape in reverse execution order
accumulates gradients into the tensors that produced the loss. Without an
active tape the ops run forward-only (inference).

The compute dtype is float32 throughout; the finite-difference oracle
re-evaluates models under a float64 context so that the oracle is more
precise than the implementation it checks.
"""

from __future__ import annotations

import math
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes cannot be combined."""


class SequenceTooShortError(ValueError):
    """A padded sequence cannot fit a single kernel window."""


# Verification hook: set to an op name (e.g. "matmul") to flip the sign of
# that op's input gradient. Exists so the gradient checker can be shown to
# catch a broken backward rule; never set in normal operation.
_SABOTAGE = os.environ.get("MADAPTER_SABOTAGE", "")

_STATE = threading.local()


def _state():
    if not hasattr(_STATE, "tape"):
        _STATE.tape = None
        _STATE.dtype = np.dtype(np.float32)
    return _STATE


@contextmanager
def compute_dtype(dtype):
    """Temporarily run ops in the given dtype (oracle use only)."""
    st = _state()
    prev = st.dtype
    st.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = prev


@contextmanager
def no_tape():
    """Suspend recording on the active tape."""
    st = _state()
    prev = st.tape
    st.tape = None
    try:
        yield
    finally:
        st.tape = prev


class Tensor:
    """Rank <= 3 dense float array with shape metadata.

    Values are immutable once an op has produced them and are safe to share
    read-only across threads. float arrays keep their dtype; any other input
    is cast to the active compute dtype (float32 by default).
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                arr = data
            else:
                arr = np.asarray(data, dtype=_state().dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.ndim > 3:
            raise DimensionError(f"rank {arr.ndim} exceeds 3 (shape {arr.shape})")
        if arr.size == 0:
            raise DimensionError(f"zero-size dimension in shape {arr.shape}")
        self.data = arr
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A named float32 tensor with a persistent gradient accumulator."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, dtype=np.float32)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Tape:
    """Ordered record of executed differentiable ops.

    Must not be shared across threads; one tape per forward pass.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        st = _state()
        self._prev = st.tape
        st.tape = self
        return self

    def __exit__(self, *exc):
        _state().tape = self._prev
        return False

    def __len__(self) -> int:
        return len(self._records)


def _record(out: Tensor, backward_fn: Callable[[np.ndarray], None]):
    tape = _state().tape
    if tape is not None:
        tape._records.append((out, backward_fn))


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _d(t: Tensor) -> np.ndarray:
    return t.data.astype(_state().dtype, copy=False)


def backward(tape: Tape, loss: Tensor):
    """Accumulate dLoss/dX into every tensor that contributed to loss.

    Repeated calls accumulate additively; zero the gradients between calls
    if that is not wanted.
    """
    if loss.data.size != 1:
        raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for out, fn in reversed(tape._records):
        if out.grad is not None:
            fn(out.grad)


# ---------------------------------------------------------------------------
# pooling geometry

@dataclass(frozen=True)
class PoolConfig:
    """1D convolutional pooling geometry: kernel, stride, symmetric padding."""

    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(
                f"invalid pooling geometry k={self.kernel} s={self.stride} p={self.padding}"
            )


IDENTITY_POOL = PoolConfig(kernel=1, stride=1, padding=0)


def out_len(length: int, cfg: PoolConfig) -> int:
    """Output length of a strided 1D convolution: floor((L+2p-k)/s)+1."""
    if length < 1:
        raise ValueError(f"length must be positive, got {length}")
    span = length + 2 * cfg.padding
    if span < cfg.kernel:
        raise SequenceTooShortError(
            f"sequence too short for kernel: L={length} padded={span} < k={cfg.kernel}"
        )
    return (span - cfg.kernel) // cfg.stride + 1


# ---------------------------------------------------------------------------
# differentiable ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _d(a), _d(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul shapes do not agree: {a.shape} x {b.shape}")
    out = Tensor(ad @ bd)

    def bwd(g):
        ga = g @ bd.T
        if _SABOTAGE == "matmul":
            ga = -ga
        _accum(a, ga)
        _accum(b, ad.T @ g)

    _record(out, bwd)
    return out


def transpose(x: Tensor) -> Tensor:
    xd = _d(x)
    if xd.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    out = Tensor(xd.T)

    def bwd(g):
        _accum(x, g.T)

    _record(out, bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a rank-1 bias broadcast over rows."""
    ad, bd = _d(a), _d(b)
    if ad.shape == bd.shape:
        out = Tensor(ad + bd)

        def bwd(g):
            _accum(a, g)
            _accum(b, g)

    elif ad.ndim == 2 and bd.ndim == 1 and bd.shape[0] == ad.shape[1]:
        out = Tensor(ad + bd)

        def bwd(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))

    else:
        raise DimensionError(f"add shapes do not agree: {a.shape} + {b.shape}")
    _record(out, bwd)
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    xd = _d(x)
    f = float(factor)
    out = Tensor(xd * xd.dtype.type(f))

    def bwd(g):
        _accum(x, g * f)

    _record(out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    xd = _d(x)
    out = Tensor(np.maximum(xd, 0))

    def bwd(g):
        _accum(x, g * (xd > 0))

    _record(out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    xd = _d(x)
    out = Tensor(np.asarray(xd.sum(), dtype=xd.dtype))

    def bwd(g):
        _accum(x, np.broadcast_to(g, xd.shape))

    _record(out, bwd)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by max subtraction."""
    xd = _d(x)
    if xd.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    z = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        _accum(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    _record(out, bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the embedding axis."""
    xd, gd, bd = _d(x), _d(gain), _d(offset)
    if xd.ndim != 2 or gd.shape != (xd.shape[1],) or bd.shape != (xd.shape[1],):
        raise DimensionError(
            f"layer_norm shapes do not agree: x={x.shape} gain={gain.shape} offset={offset.shape}"
        )
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gd + bd)

    def bwd(g):
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(offset, g.sum(axis=0))
        gh = g * gd
        _accum(
            x,
            inv
            * (
                gh
                - gh.mean(axis=1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=1, keepdims=True)
            ),
        )

    _record(out, bwd)
    return out


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, cfg: PoolConfig) -> Tensor:
    """Strided, zero-padded cross-correlation along the length axis.

    Args:
        x: (L, C_in) input sequence.
        weight: (C_out, C_in, k) filter bank.
        bias: (C_out,) per-channel offset.
        cfg: kernel/stride/padding geometry.

    Returns:
        (L', C_out) with L' = out_len(L, cfg).
    """
    xd, wd, bd = _d(x), _d(weight), _d(bias)
    if xd.ndim != 2 or wd.ndim != 3 or wd.shape[1] != xd.shape[1]:
        raise DimensionError(f"conv1d shapes do not agree: x={x.shape} weight={weight.shape}")
    if wd.shape[2] != cfg.kernel:
        raise DimensionError(f"weight kernel {wd.shape[2]} != configured kernel {cfg.kernel}")
    if bd.shape != (wd.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} != ({wd.shape[0]},)")
    length, cin = xd.shape
    cout, _, k = wd.shape
    s, p = cfg.stride, cfg.padding
    out_len(length, cfg)  # raises SequenceTooShortError on violation

    xp = np.pad(xd, ((p, p), (0, 0))) if p else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)[::s]  # (L', cin, k)
    cols = win.reshape(win.shape[0], cin * k)
    w2 = wd.reshape(cout, cin * k)
    out = Tensor(cols @ w2.T + bd)

    def bwd(g):
        _accum(weight, (g.T @ cols).reshape(wd.shape))
        _accum(bias, g.sum(axis=0))
        contrib = (g @ w2).reshape(-1, cin, k)
        n = contrib.shape[0]
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[j : j + s * (n - 1) + 1 : s] += contrib[:, :, j]
        _accum(x, dxp[p : p + length])

    _record(out, bwd)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    xd = _d(x)
    if xd.ndim != 2 or not (0 <= start < stop <= xd.shape[1]):
        raise DimensionError(f"bad column slice [{start}:{stop}] for shape {x.shape}")
    out = Tensor(xd[:, start:stop])

    def bwd(g):
        full = np.zeros_like(xd)
        full[:, start:stop] = g
        _accum(x, full)

    _record(out, bwd)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    arrs = [_d(t) for t in parts]
    rows = arrs[0].shape[0]
    if any(a.ndim != 2 or a.shape[0] != rows for a in arrs):
        raise DimensionError(f"concat_cols row mismatch: {[t.shape for t in parts]}")
    widths = [a.shape[1] for a in arrs]
    out = Tensor(np.concatenate(arrs, axis=1))

    def bwd(g):
        off = 0
        for t, w in zip(parts, widths):
            _accum(t, g[:, off : off + w])
            off += w

    _record(out, bwd)
    return out


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup (embedding gather); scatter-adds gradients back."""
    td = _d(table)
    idx = np.asarray(ids, dtype=np.intp)
    if td.ndim != 2 or idx.ndim != 1:
        raise DimensionError(f"gather_rows expects matrix table and id vector")
    if idx.size == 0 or idx.min() < 0 or idx.max() >= td.shape[0]:
        raise DimensionError(f"row ids out of range for table with {td.shape[0]} rows")
    out = Tensor(td[idx])

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g.astype(table.grad.dtype, copy=False))

    _record(out, bwd)
    return out


def softmax_cross_entropy(logits: Tensor, ids, reduction: str = "mean") -> Tensor:
    """Scalar cross-entropy of row-wise softmax against integer targets."""
    ld = _d(logits)
    idx = np.asarray(ids, dtype=np.intp)
    if ld.ndim != 2 or idx.ndim != 1 or idx.shape[0] != ld.shape[0]:
        raise DimensionError(f"cross entropy shapes: logits={logits.shape} ids={idx.shape}")
    if idx.min() < 0 or idx.max() >= ld.shape[1]:
        raise DimensionError(f"target id out of range for {ld.shape[1]} classes")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(idx.shape[0])
    nll = -logp[rows, idx]
    value = nll.mean() if reduction == "mean" else nll.sum()
    out = Tensor(np.asarray(value, dtype=ld.dtype))
    probs = np.exp(logp)

    def bwd(g):
        coef = float(g) / (idx.shape[0] if reduction == "mean" else 1)
        d = probs.copy()
        d[rows, idx] -= 1.0
        _accum(logits, coef * d)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# verification oracle

def finite_diff_grad(model_eval: Callable[[], Tensor], param: Parameter, step: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of dLoss/dParam.

    model_eval must be deterministic and return a scalar (Tensor or float).
    The evaluations run under a float64 compute context with no taping, so
    the estimate is an independent oracle, more precise than the float32
    analytic path it is used to check. The parameter buffer is perturbed in
    place and restored; the realized float32 step is used as the divisor.
    """
    shape = param.data.shape
    grad = np.zeros(shape, dtype=np.float64)
    with no_tape(), compute_dtype(np.float64):
        for idx in np.ndindex(*shape):
            orig = float(param.data[idx])
            hi = np.float32(orig + step)
            lo = np.float32(orig - step)
            param.data[idx] = hi
            fp = _scalar_value(model_eval())
            param.data[idx] = lo
            fm = _scalar_value(model_eval())
            param.data[idx] = np.float32(orig)
            grad[idx] = (fp - fm) / (float(hi) - float(lo))
    return grad


def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        if v.data.size != 1:
            raise DimensionError(f"expected scalar loss, got shape {v.shape}")
        return float(v.data)
    return float(v)


# ---------------------------------------------------------------------------
# initialization

def uniform_parameter(rng: np.random.Generator, name: str, shape: tuple, fan_in: int) -> Parameter:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(name, rng.uniform(-bound, bound, size=shape).astype(np.float32))


def const_parameter(name: str, shape: tuple, value: float) -> Parameter:
    return Parameter(name, np.full(shape, value, dtype=np.float32))
