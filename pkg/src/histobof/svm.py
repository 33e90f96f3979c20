"""Binary soft-margin SVM trained by SMO, plus inner cross-validation over C.

The dual solved is

    max_a  sum(a) - 1/2 a^T Q a   s.t.  0 <= a_i <= C,  sum(a_i y_i) = 0,

with ``Q_ij = y_i y_j K(x_i, x_j)``. Each SMO step updates the maximal
KKT-violating pair; the run stops once the violation gap is at most ``tol``.
"""

import json
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DimensionMismatch, HistoBofError
from .seeding import make_rng

SV_THRESHOLD = 1e-12
DEFAULT_C_GRID = (0.1, 1.0, 10.0, 100.0, 1000.0)


class SingleClassInput(HistoBofError, ValueError):
    pass


class TooFewSamples(HistoBofError, ValueError):
    pass


class ZeroVariance(HistoBofError, ValueError):
    pass


class NoConvergence(HistoBofError, RuntimeWarning):
    pass


@dataclass(frozen=True)
class Kernel:
    kind: str = "linear"
    gamma: float = None

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "rbf" and not (self.gamma is not None and self.gamma > 0):
            raise ValueError("rbf kernel needs gamma > 0")

    @classmethod
    def linear(cls):
        return cls("linear")

    @classmethod
    def rbf(cls, gamma):
        return cls("rbf", float(gamma))

    def matrix(self, A, B):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        if A.shape[1] != B.shape[1]:
            raise DimensionMismatch(f"dimension {A.shape[1]} vs {B.shape[1]}")
        dots = A @ B.T
        if self.kind == "linear":
            return dots
        sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * dots
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-self.gamma * sq)


def kernel_eval(kernel, x, z):
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise DimensionMismatch(f"shapes {x.shape} and {z.shape}")
    if kernel.kind == "linear":
        return float(np.dot(x, z))
    d = x - z
    return float(np.exp(-kernel.gamma * np.dot(d, d)))


@dataclass(frozen=True)
class SvmModel:
    kernel: Kernel
    support_vectors: np.ndarray = field(repr=False)
    alphas_times_labels: np.ndarray = field(repr=False)
    bias: float
    C: float
    iterations: int = 0
    final_dual_objective: float = 0.0
    converged: bool = True
    # positions of the support vectors in the training set
    support_indices: np.ndarray = field(default=None, repr=False)

    @property
    def alphas(self):
        return np.abs(self.alphas_times_labels)

    def to_json(self):
        d = {"kernel": self.kernel.kind}
        if self.kernel.kind == "rbf":
            d["gamma"] = self.kernel.gamma
        d.update({
            "C": self.C,
            "bias": self.bias,
            "support_vectors": self.support_vectors.tolist(),
            "coefficients": self.alphas_times_labels.tolist(),
        })
        return json.dumps(d)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        kernel = Kernel(d["kernel"], d.get("gamma"))
        sv = np.asarray(d["support_vectors"], dtype=np.float64)
        return cls(kernel, sv.reshape(len(d["coefficients"]), -1),
                   np.asarray(d["coefficients"], dtype=np.float64), d["bias"], d["C"])


@numba.njit(cache=True)
def _smo(Q, y, C, tol, max_iter, order, alpha, G):
    # updates alpha and the gradient G = Q alpha - 1 in place
    n = y.shape[0]
    it = 0
    converged = False
    while True:
        # i: largest KKT violation among indices that can move up; j: among
        # violators that can move down, the one with the largest second-order
        # gain. Scanning in a seeded order breaks ties.
        gmax = -np.inf
        i = -1
        for p in range(n):
            t = order[p]
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                v = -y[t] * G[t]
                if v > gmax:
                    gmax = v
                    i = t
        gmin = np.inf
        j = -1
        best_gain = 0.0
        for p in range(n):
            t = order[p]
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C):
                v = -y[t] * G[t]
                if v < gmin:
                    gmin = v
                    if i < 0:
                        j = t
                diff = gmax - v
                if i >= 0 and diff > 0:
                    quad = Q[i, i] + Q[t, t] - 2.0 * y[i] * y[t] * Q[i, t]
                    if quad <= 0:
                        quad = 1e-12
                    gain = diff * diff / quad
                    if gain > best_gain:
                        best_gain = gain
                        j = t
        if i < 0 or j < 0 or gmax - gmin <= tol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1

        old_i = alpha[i]
        old_j = alpha[j]
        if y[i] != y[j]:
            quad = Q[i, i] + Q[j, j] + 2.0 * Q[i, j]
            if quad <= 0:
                quad = 1e-12
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            quad = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
            if quad <= 0:
                quad = 1e-12
            delta = (G[i] - G[j]) / quad
            s = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if s > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = s - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = s
            if s > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = s - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = s

        di = alpha[i] - old_i
        dj = alpha[j] - old_j
        for t in range(n):
            G[t] += Q[t, i] * di + Q[t, j] * dj

    return it, converged, gmax, gmin


def dual_objective(alpha, Q):
    return float(alpha.sum() - 0.5 * alpha @ Q @ alpha)


def _labels(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 1.0) | (y == -1.0)):
        raise ValueError("labels must be -1 or +1")
    return y


def train_from_kernel(K, y, C, tol=1e-3, max_passes=None, seed=0):
    """Solve the dual for a precomputed kernel matrix.

    Returns ``(alpha, bias, iterations, converged)`` over all training points.
    """
    y = _labels(y)
    n = y.size
    if max_passes is None:
        max_passes = 10 * n
    Q = np.ascontiguousarray((y[:, None] * y[None, :]) * K)
    order = make_rng(seed).permutation(n)
    alpha = np.zeros(n)
    G = -np.ones(n)
    it, converged, gmax, gmin = _smo(Q, y, float(C), float(tol), int(max_passes) * n,
                                     order, alpha, G)
    free = (alpha > 0) & (alpha < C)
    if free.any():
        b = float(np.mean(-y[free] * G[free]))
    elif np.isfinite(gmax) and np.isfinite(gmin):
        b = 0.5 * (gmax + gmin)
    else:
        b = 0.0
    return alpha, b, int(it), bool(converged)


def svm_train(X, y, C, kernel=Kernel(), tol=1e-3, max_passes=None, seed=0):
    """Train a soft-margin SVM by SMO.

    One pass is ``n`` pair updates; ``max_passes`` defaults to ``10 * n``. A
    run that hits the cap still returns its last model, with
    ``converged=False`` and a :class:`NoConvergence` warning.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = _labels(y)
    if X.shape[0] != y.size:
        raise DimensionMismatch(f"{X.shape[0]} vectors but {y.size} labels")
    if X.shape[0] < 2 or np.all(y == y[0]):
        raise SingleClassInput("training data needs at least one example of each class")
    if C <= 0:
        raise ValueError("C must be positive")
    K = kernel.matrix(X, X)
    alpha, b, it, converged = train_from_kernel(K, y, C, tol, max_passes, seed)
    if not converged:
        warnings.warn(f"SMO stopped after {it} updates without meeting tol={tol}",
                      NoConvergence, stacklevel=2)
    Q = (y[:, None] * y[None, :]) * K
    sv = np.flatnonzero(alpha > SV_THRESHOLD)
    return SvmModel(kernel, X[sv].copy(), alpha[sv] * y[sv], b, float(C), it,
                    dual_objective(alpha, Q), converged, sv)


def decision_values(model, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if model.support_vectors.size == 0:
        return np.full(X.shape[0], model.bias)
    if X.shape[1] != model.support_vectors.shape[1]:
        raise DimensionMismatch(
            f"input dimension {X.shape[1]}, model dimension {model.support_vectors.shape[1]}")
    return model.kernel.matrix(X, model.support_vectors) @ model.alphas_times_labels + model.bias


def decision_value(model, x):
    return float(decision_values(model, x)[0])


def sign_label(values):
    """+1 / -1 labels; a decision value of exactly zero maps to +1."""
    return np.where(np.asarray(values) >= 0.0, 1, -1)


def svm_predict(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return int(sign_label(decision_value(model, x)))
    return sign_label(decision_values(model, x))


def rbf_gamma_default(X):
    """``1 / (d * mean per-dimension variance)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] < 2:
        raise ValueError("need at least two vectors")
    var = X.var(axis=0).mean()
    if var <= 0.0:
        raise ZeroVariance("all vectors are identical")
    return 1.0 / (X.shape[1] * var)


@dataclass(frozen=True)
class CvSelection:
    grid: tuple
    folds: int
    accuracies: tuple
    chosen_C: float


def fold_assignment(n, folds, seed, groups=None):
    """Fold index per sample; samples sharing a group stay in one fold."""
    if groups is None:
        groups = np.arange(n)
    groups = list(groups)
    unique = list(dict.fromkeys(groups))
    if len(unique) < folds:
        raise TooFewSamples(f"{len(unique)} groups cannot fill {folds} folds")
    perm = make_rng(seed).permutation(len(unique))
    fold_of = {unique[g]: pos % folds for pos, g in enumerate(perm)}
    return np.array([fold_of[g] for g in groups])


def select_C(X, y, grid=DEFAULT_C_GRID, folds=5, kernel=Kernel(), seed=0, groups=None,
             tol=1e-3):
    """Pick C by k-fold cross-validated accuracy; ties go to the smallest C.

    One fold partition (seeded, optionally grouped) is shared by every grid
    value so the comparison is paired.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = _labels(y)
    grid = tuple(float(c) for c in grid)
    if not grid:
        raise ValueError("empty C grid")
    if folds < 2 or X.shape[0] < folds:
        raise TooFewSamples(f"{X.shape[0]} samples cannot fill {folds} folds")
    if len(grid) == 1:
        return CvSelection(grid, folds, (float("nan"),), grid[0])

    fold = fold_assignment(X.shape[0], folds, seed, groups)
    K = kernel.matrix(X, X)
    accs = []
    for c in grid:
        per_fold = []
        for f in range(folds):
            tr = fold != f
            te = ~tr
            ytr = y[tr]
            if np.all(ytr == ytr[0]):
                pred = np.full(te.sum(), ytr[0])
            else:
                alpha, b, _, _ = train_from_kernel(K[np.ix_(tr, tr)], ytr, c, tol,
                                                   seed=seed)
                dec = K[np.ix_(te, tr)] @ (alpha * ytr) + b
                pred = sign_label(dec)
            per_fold.append(float(np.mean(pred == y[te])))
        accs.append(float(np.mean(per_fold)))
    best = max(accs)
    chosen = min(c for c, a in zip(grid, accs) if a == best)
    return CvSelection(grid, folds, tuple(accs), chosen)
