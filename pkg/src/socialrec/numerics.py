"""Minimal dense/sparse tensor engine with reverse-mode differentiation.

Everything is double precision and rank <= 2: model math is matrix shaped,
batched by rows.  Operations executed through a :class:`Tape` are recorded
in execution order; :meth:`Tape.backward` replays them in exact reverse
order, accumulating gradients additively.  Forward passes over frozen
values never touch shared state, so inference is thread-safe as long as
each thread uses its own tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericalError, ShapeError


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"rank {arr.ndim} > 2 not supported (shape {arr.shape})")
    return np.atleast_2d(arr)


class Tensor:
    """A 2-d float64 value carrier with an optional gradient buffer."""

    __slots__ = ("values", "grad")

    def __init__(self, values):
        self.values = _as_matrix(values)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        if self.grad is None:
            return np.zeros_like(self.values)
        return self.grad

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class SparseMatrix:
    """Compressed sparse rows: per-row strictly increasing column indices."""

    __slots__ = ("rows", "cols", "indptr", "indices", "values", "_csr", "_csr_t")

    def __init__(self, rows, cols, indptr, indices, values):
        self.rows = int(rows)
        self.cols = int(cols)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self._csr = None
        self._csr_t = None
        self._validate()

    def _validate(self):
        if self.indptr.shape != (self.rows + 1,):
            raise ShapeError(f"indptr length {self.indptr.shape[0]} != rows+1 ({self.rows + 1})")
        if self.indices.shape != self.values.shape:
            raise ShapeError("indices and values length mismatch")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= self.cols:
                raise ShapeError(f"column index out of bounds for {self.cols} columns")
            # strictly increasing within each row
            inc = np.diff(self.indices) > 0
            row_start = np.zeros(self.indices.size, dtype=bool)
            starts = self.indptr[1:-1]
            row_start[starts[starts < self.indices.size]] = True
            if not np.all(inc | row_start[1:]):
                raise ShapeError("column indices must be strictly increasing per row")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("sparse matrix contains non-finite values")

    @classmethod
    def from_coo(cls, rows, cols, row_idx, col_idx, vals):
        """Build from coordinate triplets; duplicate entries are summed."""
        m = sp.coo_matrix(
            (np.asarray(vals, dtype=np.float64), (row_idx, col_idx)), shape=(rows, cols)
        ).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls(rows, cols, m.indptr, m.indices, m.data)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def to_scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.values, self.indices, self.indptr), shape=(self.rows, self.cols)
            )
        return self._csr

    def _scipy_t(self) -> sp.csr_matrix:
        if self._csr_t is None:
            self._csr_t = self.to_scipy().T.tocsr()
        return self._csr_t

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def __repr__(self):
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` over axes that were broadcast to reach its shape."""
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _broadcastable(a, b) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


class Tape:
    """Ordered record of executed operations enabling backward traversal.

    Construction and backward are single-writer; use one tape per thread.
    """

    def __init__(self):
        self._records = []

    def _record(self, backward_fn):
        self._records.append(backward_fn)

    @staticmethod
    def _accum(t: Tensor, g: np.ndarray):
        if t.grad is None:
            t.grad = g.astype(np.float64, copy=True)
        else:
            t.grad += g

    # -- binary elementwise ------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if not _broadcastable(a.shape, b.shape):
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
        out = Tensor(a.values + b.values)

        def backward():
            if out.grad is None:
                return
            self._accum(a, _unbroadcast(out.grad, a.shape))
            self._accum(b, _unbroadcast(out.grad, b.shape))

        self._record(backward)
        return out

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if not _broadcastable(a.shape, b.shape):
            raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
        out = Tensor(a.values - b.values)

        def backward():
            if out.grad is None:
                return
            self._accum(a, _unbroadcast(out.grad, a.shape))
            self._accum(b, -_unbroadcast(out.grad, b.shape))

        self._record(backward)
        return out

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if not _broadcastable(a.shape, b.shape):
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
        out = Tensor(a.values * b.values)

        def backward():
            if out.grad is None:
                return
            self._accum(a, _unbroadcast(out.grad * b.values, a.shape))
            self._accum(b, _unbroadcast(out.grad * a.values, b.shape))

        self._record(backward)
        return out

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        out = Tensor(a.values * c)

        def backward():
            if out.grad is None:
                return
            self._accum(a, out.grad * c)

        self._record(backward)
        return out

    # -- matrix products ---------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
        out = Tensor(a.values @ b.values)

        def backward():
            if out.grad is None:
                return
            self._accum(a, out.grad @ b.values.T)
            self._accum(b, a.values.T @ out.grad)

        self._record(backward)
        return out

    def spmm(self, m: SparseMatrix, x: Tensor) -> Tensor:
        """Sparse @ dense.  The sparse operand is data, not a parameter."""
        if m.cols != x.shape[0]:
            raise ShapeError(f"spmm: inner dims differ, {m.rows}x{m.cols} @ {x.shape}")
        out = Tensor(np.asarray(m.to_scipy() @ x.values))

        def backward():
            if out.grad is None:
                return
            self._accum(x, np.asarray(m._scipy_t() @ out.grad))

        self._record(backward)
        return out

    # -- elementwise nonlinearities ------------------------------------------

    def leaky_relu(self, a: Tensor, slope: float = 0.2) -> Tensor:
        mask = np.where(a.values >= 0.0, 1.0, float(slope))
        out = Tensor(a.values * mask)

        def backward():
            if out.grad is None:
                return
            self._accum(a, out.grad * mask)

        self._record(backward)
        return out

    def sigmoid(self, a: Tensor) -> Tensor:
        v = np.empty_like(a.values)
        pos = a.values >= 0
        v[pos] = 1.0 / (1.0 + np.exp(-a.values[pos]))
        ev = np.exp(a.values[~pos])
        v[~pos] = ev / (1.0 + ev)
        out = Tensor(v)

        def backward():
            if out.grad is None:
                return
            self._accum(a, out.grad * v * (1.0 - v))

        self._record(backward)
        return out

    def log(self, a: Tensor) -> Tensor:
        out = Tensor(np.log(a.values))

        def backward():
            if out.grad is None:
                return
            self._accum(a, out.grad / a.values)

        self._record(backward)
        return out

    def log_sigmoid(self, a: Tensor) -> Tensor:
        """log(sigmoid(x)), exact and finite for all finite inputs.

        Computed as -softplus(-x); the two-step sigmoid-then-log path
        underflows to -inf around x < -745 and loses all gradient once
        sigmoid saturates, which starves any loss built on it.
        """
        x = a.values
        v = np.where(x < 0, x, 0.0) - np.log1p(np.exp(-np.abs(x)))
        sig_neg = np.empty_like(x)
        pos = x >= 0
        sig_neg[pos] = np.exp(-x[pos]) / (1.0 + np.exp(-x[pos]))
        sig_neg[~pos] = 1.0 / (1.0 + np.exp(x[~pos]))
        out = Tensor(v)

        def backward():
            if out.grad is None:
                return
            self._accum(a, out.grad * sig_neg)

        self._record(backward)
        return out

    def softmax_rows(self, a: Tensor) -> Tensor:
        shifted = a.values - a.values.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        v = e / e.sum(axis=1, keepdims=True)
        out = Tensor(v)

        def backward():
            if out.grad is None:
                return
            dot = (out.grad * v).sum(axis=1, keepdims=True)
            self._accum(a, v * (out.grad - dot))

        self._record(backward)
        return out

    # -- structure ---------------------------------------------------------

    def concat_cols(self, parts) -> Tensor:
        parts = list(parts)
        if not parts:
            raise ShapeError("concat_cols: empty input")
        n = parts[0].shape[0]
        for p in parts:
            if p.shape[0] != n:
                raise ShapeError(
                    f"concat_cols: row counts differ ({[p.shape for p in parts]})"
                )
        out = Tensor(np.concatenate([p.values for p in parts], axis=1))
        offsets = np.cumsum([0] + [p.shape[1] for p in parts])

        def backward():
            if out.grad is None:
                return
            for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
                self._accum(p, out.grad[:, j0:j1])

        self._record(backward)
        return out

    def slice_cols(self, a: Tensor, start: int, stop: int) -> Tensor:
        if not (0 <= start < stop <= a.shape[1]):
            raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
        out = Tensor(a.values[:, start:stop].copy())

        def backward():
            if out.grad is None:
                return
            g = np.zeros_like(a.values)
            g[:, start:stop] = out.grad
            self._accum(a, g)

        self._record(backward)
        return out

    def gather_rows(self, a: Tensor, index) -> Tensor:
        idx = np.asarray(index, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
        out = Tensor(a.values[idx])

        def backward():
            if out.grad is None:
                return
            g = np.zeros_like(a.values)
            np.add.at(g, idx, out.grad)
            self._accum(a, g)

        self._record(backward)
        return out

    def scatter_add_rows(self, a: Tensor, index, num_rows: int) -> Tensor:
        idx = np.asarray(index, dtype=np.int64).ravel()
        if idx.size != a.shape[0]:
            raise ShapeError(f"scatter_add_rows: {idx.size} indices for {a.shape[0]} rows")
        if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
            raise ShapeError(f"scatter_add_rows: index out of range for {num_rows} rows")
        v = np.zeros((num_rows, a.shape[1]))
        np.add.at(v, idx, a.values)
        out = Tensor(v)

        def backward():
            if out.grad is None:
                return
            self._accum(a, out.grad[idx])

        self._record(backward)
        return out

    # -- reductions ----------------------------------------------------------

    def row_mean(self, a: Tensor) -> Tensor:
        n = a.shape[0]
        out = Tensor(a.values.mean(axis=0, keepdims=True))

        def backward():
            if out.grad is None:
                return
            self._accum(a, np.broadcast_to(out.grad / n, a.shape))

        self._record(backward)
        return out

    def rowwise_dot(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"rowwise_dot: shapes differ, {a.shape} vs {b.shape}")
        out = Tensor((a.values * b.values).sum(axis=1, keepdims=True))

        def backward():
            if out.grad is None:
                return
            self._accum(a, out.grad * b.values)
            self._accum(b, out.grad * a.values)

        self._record(backward)
        return out

    def sum_all(self, a: Tensor) -> Tensor:
        out = Tensor(a.values.sum())

        def backward():
            if out.grad is None:
                return
            self._accum(a, np.full_like(a.values, out.grad[0, 0]))

        self._record(backward)
        return out

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(tensor) into .grad for every reachable tensor."""
        if loss.shape != (1, 1):
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones((1, 1))
        for fn in reversed(self._records):
            fn()

    def __len__(self):
        return len(self._records)


# -- gradient checking -------------------------------------------------------


def gradient_check(loss_builder, params, step: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_builder(tape)` must deterministically rebuild the scalar loss from
    the current parameter values.  Returns the maximum over all parameter
    entries of |analytic - central difference| / max(1, |analytic|).
    """
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    params = list(params)
    if not params:
        return 0.0

    tape = Tape()
    loss = loss_builder(tape)
    if not np.isfinite(loss.values).all():
        raise NumericalError("loss is non-finite at the evaluation point")
    for p in params:
        p.zero_grad()
    tape.backward(loss)
    analytic = [p.grad_or_zeros().copy() for p in params]

    def eval_loss() -> float:
        t = Tape()
        val = loss_builder(t).item()
        if not np.isfinite(val):
            raise NumericalError("loss is non-finite during finite differencing")
        return val

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.values.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = eval_loss()
            flat[i] = orig - step
            down = eval_loss()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            a = ana.ravel()[i]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers, one pair per parameter, plus step count."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        params = list(params)
        return cls(
            m=[np.zeros_like(p.values) for p in params],
            v=[np.zeros_like(p.values) for p in params],
        )


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One in-place Adam update with bias correction."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    params = list(params)
    grads = list(grads)
    if len(state.m) != len(params):
        raise ShapeError("Adam state does not match parameter list")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = p.grad_or_zeros() if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.values.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.values.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- seeded randomness ---------------------------------------------------------

# Fixed stream ids keep independent sampling purposes on independent
# counter-based streams under one user-facing seed.
STREAM_INIT = 0
STREAM_TRIPLES = 1
STREAM_CORRUPT = 2
STREAM_EVAL_NEGATIVES = 3
STREAM_VALID_NEGATIVES = 4
STREAM_SYNTH = 5
STREAM_GRAPH = 6


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator; identical across runs and platforms."""
    return np.random.Generator(np.random.Philox(key=np.uint64([seed, stream])))
