"""Decoders mapping the sparse leaf encoding to a shape increment.

Four kinds share one interface:

* ``ll``     full linear map ``W @ phi``
* ``rrr``    rank-r factorization ``W2 @ (W1 @ phi)`` fitted in closed form
* ``rrrbp``  the same factorization fitted by SGD
* ``nn``     ``W3 tanh(W2 tanh(W1 phi + b1) + b2) + b3`` fitted by SGD

The Phi-facing matrix (``W`` or ``W1``) is exposed as ``first``; it may be
a dense float32 array or a quantized matrix with a ``gather_sum`` method.
Encodings are passed as ``(N, n_trees)`` integer arrays of active columns.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import kernels
from .errors import DataError, DecoderFitError, DivergenceError

KINDS = ("ll", "rrr", "rrrbp", "nn")
DENSE_SOLVE_LIMIT = 8192


def _f32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


def _active(phi):
    a = getattr(phi, "active", phi)
    a = np.asarray(a, dtype=np.int64)
    return a[None, :] if a.ndim == 1 else a


def sparse_matvec(matrix, phi) -> np.ndarray:
    """Sum of the columns of ``matrix`` selected by ``phi`` (float64 output)."""
    active = _active(phi)
    cols = getattr(matrix, "cols", None) or matrix.shape[1]
    if active.size and (active.min() < 0 or active.max() >= cols):
        raise IndexError(f"active column out of range for a matrix with {cols} columns")
    if isinstance(matrix, np.ndarray):
        out = kernels.gather_sum(matrix, active)
    else:
        out = matrix.gather_sum(active)
    return out[0] if np.ndim(getattr(phi, "active", phi)) == 1 else out


class Decoder:
    kind = ""
    first_name = "W1"
    first: object

    @property
    def in_dim(self):
        m = self.first
        return m.cols if hasattr(m, "cols") else m.shape[1]

    @property
    def code_dim(self):
        m = self.first
        return m.rows if hasattr(m, "rows") else m.shape[0]

    def encode(self, active) -> np.ndarray:
        """The compact code ``W1 @ phi`` (for ``ll`` this is already the increment)."""
        active = _active(active)
        if active.shape[1] and active.max() >= self.in_dim:
            raise DataError(f"encoding exceeds decoder input dimension {self.in_dim}")
        if isinstance(self.first, np.ndarray):
            return kernels.gather_sum(self.first, active)
        return self.first.gather_sum(active)

    def head(self, code) -> np.ndarray:
        raise NotImplementedError

    def decode(self, active) -> np.ndarray:
        return self.head(self.encode(active))

    def with_first(self, matrix):
        out = copy.copy(self)
        setattr(out, self.first_name, matrix)
        return out

    def matrices(self):
        """Name -> array for every stored parameter, in file order."""
        raise NotImplementedError


@dataclass(eq=False)
class LinearDecoder(Decoder):
    W: object
    kind = "ll"
    first_name = "W"

    def __post_init__(self):
        if isinstance(self.W, np.ndarray):
            self.W = _f32(self.W)

    @property
    def first(self):
        return self.W

    @property
    def out_dim(self):
        return self.code_dim

    def head(self, code):
        return code

    def matrices(self):
        return {"W": self.W}


@dataclass(eq=False)
class ReducedRankDecoder(Decoder):
    W1: object
    W2: np.ndarray
    backprop: bool = False

    def __post_init__(self):
        if isinstance(self.W1, np.ndarray):
            self.W1 = _f32(self.W1)
        self.W2 = _f32(self.W2)
        if self.W2.shape[1] != self.code_dim:
            raise DataError("W2 columns must equal W1 rows")

    @property
    def kind(self):
        return "rrrbp" if self.backprop else "rrr"

    @property
    def first(self):
        return self.W1

    @property
    def out_dim(self):
        return self.W2.shape[0]

    def head(self, code):
        return code @ self.W2.T.astype(np.float64)

    def matrices(self):
        return {"W1": self.W1, "W2": self.W2}


@dataclass(eq=False)
class NeuralDecoder(Decoder):
    W1: object
    W2: np.ndarray
    W3: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    kind = "nn"

    def __post_init__(self):
        if isinstance(self.W1, np.ndarray):
            self.W1 = _f32(self.W1)
        for name in ("W2", "W3", "b1", "b2", "b3"):
            setattr(self, name, _f32(getattr(self, name)))
        r = self.code_dim
        if self.W2.shape[1] != r or self.W3.shape[1] != self.W2.shape[0]:
            raise DataError("inconsistent NN layer sizes")
        if self.b1.shape != (r,) or self.b2.shape != (self.W2.shape[0],) or self.b3.shape != (self.W3.shape[0],):
            raise DataError("inconsistent NN bias sizes")

    @property
    def first(self):
        return self.W1

    @property
    def out_dim(self):
        return self.W3.shape[0]

    def head(self, code):
        f64 = np.float64
        h1 = np.tanh(code + self.b1.astype(f64))
        h2 = np.tanh(h1 @ self.W2.T.astype(f64) + self.b2.astype(f64))
        return h2 @ self.W3.T.astype(f64) + self.b3.astype(f64)

    def matrices(self):
        return {"W1": self.W1, "W2": self.W2, "W3": self.W3,
                "b1": self.b1, "b2": self.b2, "b3": self.b3}


def decode(dec: Decoder, phi) -> np.ndarray:
    """Shape increment for one encoding (1-D) or a batch (2-D)."""
    out = dec.decode(_active(phi))
    return out[0] if np.ndim(getattr(phi, "active", phi)) == 1 else out


# -- closed-form fitting -----------------------------------------------------

def design_matrix(active, dim) -> scipy.sparse.csr_matrix:
    active = _active(active)
    n, k = active.shape
    if active.size and (active.min() < 0 or active.max() >= dim):
        raise IndexError("active column out of range")
    data = np.ones(n * k)
    return scipy.sparse.csr_matrix((data, active.ravel(), np.arange(0, n * k + 1, k)), shape=(n, dim))


def default_ridge(n_samples, dim):
    return 1e-3 * n_samples / dim


def ridge_solve(active, Y, dim, lam) -> np.ndarray:
    """Ridge least squares ``B`` (dim x o) from the normal equations of the sparse Gram matrix."""
    if lam <= 0:
        raise DataError("ridge parameter must be positive")
    Y = np.asarray(Y, dtype=np.float64)
    X = design_matrix(active, dim)
    if X.shape[0] != len(Y):
        raise DataError("encodings and targets differ in length")
    gram = (X.T @ X).tocsc() + lam * scipy.sparse.identity(dim, format="csc")
    rhs = np.asarray(X.T @ Y)
    if dim <= DENSE_SOLVE_LIMIT:
        try:
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram.toarray()), rhs)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise DecoderFitError(f"normal equations failed: {exc}") from exc
    out = np.empty_like(rhs)
    diag = gram.diagonal()
    precond = scipy.sparse.diags(1.0 / diag)
    for j in range(rhs.shape[1]):
        sol, info = scipy.sparse.linalg.cg(gram, rhs[:, j], rtol=1e-10, maxiter=5000, M=precond)
        if info != 0:
            raise DecoderFitError(f"conjugate gradient did not converge for output {j}")
        out[:, j] = sol
    return out


def fit_ll(active, Y, dim, lam=None) -> LinearDecoder:
    if lam is None:
        lam = default_ridge(len(Y), dim)
    return LinearDecoder(ridge_solve(active, Y, dim, lam).T)


def rrr_factors(active, Y, dim, r, lam):
    """Rank-r factors ``(W1, W2)`` in float64 from the SVD of the ridge fit."""
    Y = np.asarray(Y, dtype=np.float64)
    o = Y.shape[1]
    if not 1 <= r <= o:
        raise DataError(f"rank {r} must lie in [1, {o}]")
    B = ridge_solve(active, Y, dim, lam)
    fitted = design_matrix(active, dim) @ B
    if not np.all(np.isfinite(fitted)):
        raise DecoderFitError("non-finite fitted values")
    try:
        _, _, vt = np.linalg.svd(fitted, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise DecoderFitError(f"SVD failed: {exc}") from exc
    v_r = vt[:r].T
    return (B @ v_r).T, v_r


def fit_rrr(active, Y, dim, r, lam=None) -> ReducedRankDecoder:
    if lam is None:
        lam = default_ridge(len(Y), dim)
    W1, W2 = rrr_factors(active, Y, dim, r, lam)
    return ReducedRankDecoder(W1, W2)


def validation_split(n, rng, groups=None, fraction=0.1):
    """Train/validation index arrays; whole groups go to validation together."""
    if n < 2:
        idx = np.arange(n)
        return idx, idx
    if groups is not None:
        groups = np.asarray(groups)
        uniq = np.unique(groups)
        if len(uniq) >= 2:
            n_val = max(1, int(round(fraction * len(uniq))))
            val_groups = rng.permutation(uniq)[:n_val]
            is_val = np.isin(groups, val_groups)
            return np.flatnonzero(~is_val), np.flatnonzero(is_val)
    perm = rng.permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def select_ridge(active, Y, dim, rng, groups=None, multipliers=(1, 10, 100, 1000, 10000)):
    """Pick the ridge strength with the lowest held-out squared error."""
    active = _active(active)
    Y = np.asarray(Y, dtype=np.float64)
    tr, va = validation_split(len(Y), rng, groups)
    base = default_ridge(len(tr), dim)
    best = None
    for m in multipliers:
        lam = base * m
        B = ridge_solve(active[tr], Y[tr], dim, lam)
        err = float(np.mean((design_matrix(active[va], dim) @ B - Y[va]) ** 2))
        if best is None or err < best[0]:
            best = (err, m)
    return default_ridge(len(Y), dim) * best[1]


# -- gradient training -------------------------------------------------------

def init_weights(kind, dims, rng) -> Decoder:
    """Uniform initialization in +-1/sqrt(fan_in), zero biases.

    ``dims`` is ``(o, P)`` for ``ll`` and ``(o, P, r)`` otherwise.
    """
    def uni(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols))

    if kind == "ll":
        o, p = dims[:2]
        return LinearDecoder(uni(o, p))
    o, p, r = dims
    if kind in ("rrr", "rrrbp"):
        return ReducedRankDecoder(uni(r, p), uni(o, r), backprop=kind == "rrrbp")
    if kind == "nn":
        return NeuralDecoder(uni(r, p), uni(2 * r, r), uni(o, 2 * r),
                             np.zeros(r), np.zeros(2 * r), np.zeros(o))
    raise DataError(f"unknown decoder kind {kind!r}")


def _params64(dec):
    return {k: np.array(v, dtype=np.float64) for k, v in dec.matrices().items()}


def _forward(kind, params, active):
    e = kernels.gather_sum(params["W1"], active)
    if kind == "rrrbp":
        return e @ params["W2"].T, (e,)
    h1 = np.tanh(e + params["b1"])
    h2 = np.tanh(h1 @ params["W2"].T + params["b2"])
    return h2 @ params["W3"].T + params["b3"], (h1, h2)


def loss_and_grads(kind, params, active, Y):
    """Mean squared error ``mean_n (1/o)||f - y||^2`` and its exact gradient.

    The ``W1`` gradient is dense here (used for checks); training applies it
    sparsely through :func:`sgd_step`.
    """
    grads, loss = _backward(kind, params, _active(active), np.asarray(Y, np.float64))
    dense = np.zeros_like(params["W1"])
    kernels.scatter_add(dense, _active(active), grads.pop("_code"), 1.0)
    grads["W1"] = dense
    return loss, grads


def _backward(kind, params, active, Y):
    f, cache = _forward(kind, params, active)
    n, o = Y.shape
    resid = f - Y
    loss = float(np.sum(resid**2) / (n * o))
    g = 2.0 * resid / (n * o)
    grads = {}
    if kind == "rrrbp":
        (e,) = cache
        grads["W2"] = g.T @ e
        grads["_code"] = g @ params["W2"]
    else:
        h1, h2 = cache
        grads["W3"] = g.T @ h2
        grads["b3"] = g.sum(axis=0)
        ga2 = (g @ params["W3"]) * (1.0 - h2**2)
        grads["W2"] = ga2.T @ h1
        grads["b2"] = ga2.sum(axis=0)
        ga1 = (ga2 @ params["W2"]) * (1.0 - h1**2)
        grads["b1"] = ga1.sum(axis=0)
        grads["_code"] = ga1
    return grads, loss


def sgd_step(kind, params, active, Y, lr):
    """One in-place SGD update; only the active columns of ``W1`` change."""
    active = _active(active)
    grads, loss = _backward(kind, params, active, np.asarray(Y, np.float64))
    kernels.scatter_add(params["W1"], active, grads.pop("_code"), -lr)
    for k, g in grads.items():
        params[k] -= lr * g
    return loss


def _mse(kind, params, active, Y):
    f, _ = _forward(kind, params, active)
    return float(np.mean((f - Y) ** 2))


@dataclass
class SGDSchedule:
    lr0: float = 1.0
    patience: int = 3
    min_improvement: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    min_lr: float = 1.0 / 1024
    val_fraction: float = 0.1


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1           # -1: the initial weights were never beaten
    initial_val_loss: float = float("inf")

    def as_dict(self):
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "lr": self.lr,
                "best_epoch": self.best_epoch, "initial_val_loss": self.initial_val_loss}


def _rebuild(dec, params):
    if dec.kind == "rrrbp":
        return ReducedRankDecoder(params["W1"], params["W2"], backprop=True)
    return NeuralDecoder(**params)


def fit_sgd(dec: Decoder, active, Y, schedule: SGDSchedule, rng, groups=None, split=None):
    """Minibatch SGD with learning-rate halving on validation plateaus.

    Returns the weights with the best validation loss (the initial weights
    included, ``best_epoch == -1``) and the training log. ``split`` may
    supply explicit ``(train_idx, val_idx)``.
    """
    if dec.kind not in ("rrrbp", "nn"):
        raise DataError(f"SGD fitting supports rrrbp and nn, not {dec.kind}")
    if not isinstance(dec.first, np.ndarray):
        raise DataError("cannot train a quantized decoder")
    kind = dec.kind
    active = _active(active)
    Y = np.asarray(Y, dtype=np.float64)
    if split is None:
        split = validation_split(len(Y), rng, groups, schedule.val_fraction)
    tr, va = (np.asarray(s, dtype=np.int64) for s in split)
    params = _params64(dec)
    # the starting point competes too, so training never returns worse weights
    with np.errstate(over="ignore", invalid="ignore"):
        start = _mse(kind, params, active[va], Y[va])
    best = (start if np.isfinite(start) else np.inf, copy.deepcopy(params))
    ref = best[0]
    log = TrainLog(initial_val_loss=best[0])
    lr = schedule.lr0
    stall = 0
    for epoch in range(schedule.max_epochs):
        order = tr[rng.permutation(len(tr))]
        # overflow surfaces as a non-finite loss below
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, len(order), schedule.batch_size):
                b = order[start:start + schedule.batch_size]
                sgd_step(kind, params, active[b], Y[b], lr)
            train_loss = _mse(kind, params, active[tr], Y[tr])
            val_loss = _mse(kind, params, active[va], Y[va])
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergenceError(f"loss became non-finite at epoch {epoch} (lr={lr})")
        log.train_loss.append(train_loss)
        log.val_loss.append(val_loss)
        log.lr.append(lr)
        if val_loss < best[0]:
            best = (val_loss, copy.deepcopy(params))
            log.best_epoch = epoch
        if val_loss < ref * (1.0 - schedule.min_improvement):
            ref = val_loss
            stall = 0
        else:
            stall += 1
            if stall >= schedule.patience:
                lr *= 0.5
                stall = 0
                if lr < schedule.min_lr:
                    break
    return _rebuild(dec, best[1]), log
