"""k-means codebooks and bag-of-features histograms."""

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from .errors import DimensionMismatch, EmptyFeatureList, HistoBofError
from .seeding import make_rng


class TooFewVectors(HistoBofError, ValueError):
    pass


@dataclass(frozen=True)
class Codebook:
    k: int
    dimension: int
    centroids: np.ndarray = field(repr=False)
    seed: int = 0
    iterations_run: int = 0
    final_distortion: float = 0.0
    # distortion after k-means++ seeding, then after every Lloyd iteration
    trace: tuple = field(default=(), repr=False, compare=False)

    def to_json(self):
        return json.dumps({
            "k": self.k,
            "dimension": self.dimension,
            "seed": self.seed,
            "iterations_run": self.iterations_run,
            "final_distortion": self.final_distortion,
            "centroids": self.centroids.tolist(),
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        centroids = np.asarray(d["centroids"], dtype=np.float64).reshape(d["k"], d["dimension"])
        return cls(d["k"], d["dimension"], centroids, d.get("seed", 0),
                   d.get("iterations_run", 0), d.get("final_distortion", 0.0))


@dataclass(frozen=True)
class BofHistogram:
    wsi_id: str
    bins: np.ndarray
    patch_count: int


def _as_matrix(vectors):
    if isinstance(vectors, np.ndarray):
        X = vectors
    else:
        rows = [getattr(v, "values", v) for v in vectors]
        dims = {np.shape(r) for r in rows}
        if len(dims) > 1:
            raise DimensionMismatch(f"vectors have mixed shapes {sorted(dims)}")
        X = np.array(rows, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X


def _sq_distances(X, C, x_sq=None):
    """Squared Euclidean distances, shape (n, k), via the dot-product expansion."""
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", X, X)
    d = x_sq[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def assign_all(codebook, X, chunk=8192, x_sq=None):
    """Nearest-centroid index for every row of ``X`` (first index on ties).

    ``x_sq`` optionally supplies the precomputed squared row norms of ``X``.
    """
    X = _as_matrix(X)
    C = codebook.centroids if isinstance(codebook, Codebook) else np.asarray(codebook)
    if X.shape[1] != C.shape[1]:
        raise DimensionMismatch(f"vectors have dimension {X.shape[1]}, codebook {C.shape[1]}")
    out = np.empty(X.shape[0], dtype=np.int64)
    for s in range(0, X.shape[0], chunk):
        sq = None if x_sq is None else x_sq[s:s + chunk]
        out[s:s + chunk] = np.argmin(_sq_distances(X[s:s + chunk], C, sq), axis=1)
    return out


def assign(codebook, v):
    """Index of the centroid closest to ``v``; ties go to the lowest index.

    Distances are computed from explicit differences so exact ties resolve
    deterministically.
    """
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    if v.shape != (codebook.dimension,):
        raise DimensionMismatch(f"vector has shape {v.shape}, codebook dimension {codebook.dimension}")
    d = ((codebook.centroids - v) ** 2).sum(axis=1)
    return int(np.argmin(d))


def distortion(codebook, vectors):
    """Sum of squared distances from each vector to its nearest centroid."""
    X = _as_matrix(vectors)
    C = codebook.centroids
    if X.shape[1] != C.shape[1]:
        raise DimensionMismatch(f"vectors have dimension {X.shape[1]}, codebook {C.shape[1]}")
    labels = assign_all(codebook, X)
    return float(((X - C[labels]) ** 2).sum())


def _plusplus(X, k, rng):
    n = X.shape[0]
    centers = np.empty(k, dtype=np.int64)
    centers[0] = rng.integers(n)
    closest = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every point coincides with a chosen center; take an unused index
            unused = np.setdiff1d(np.arange(n), centers[:i])
            centers[i] = unused[rng.integers(unused.size)]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            centers[i] = min(idx, n - 1)
        np.minimum(closest, ((X - X[centers[i]]) ** 2).sum(axis=1), out=closest)
    return X[centers].copy()


def _point_distortions(X, C, labels):
    D = X - C[labels]
    return np.einsum("ij,ij->i", D, D)


def _update(X, labels, k):
    n = X.shape[0]
    onehot = scipy.sparse.csr_matrix((np.ones(n), (labels, np.arange(n))), shape=(k, n))
    sums = onehot @ X
    counts = np.bincount(labels, minlength=k)
    return sums, counts


def kmeans_fit(vectors, k, seed=0, max_iter=100, tol=1e-6, on_iteration=None):
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the relative distortion decrease drops below ``tol`` or after
    ``max_iter`` iterations. An empty cluster takes over the point farthest from
    its current centroid. ``on_iteration(i, distortion)`` is called after the
    seeding (``i = 0``) and after every iteration.
    """
    X = _as_matrix(vectors)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < k:
        raise TooFewVectors(f"need at least k={k} vectors, got {n}")
    if max_iter < 1 or tol < 0:
        raise ValueError("max_iter must be >= 1 and tol >= 0")

    rng = make_rng(seed)
    x_sq = np.einsum("ij,ij->i", X, X)
    C = _plusplus(X, k, rng)
    labels = assign_all(C, X, x_sq=x_sq)
    current = float(_point_distortions(X, C, labels).sum())
    trace = [current]
    if on_iteration is not None:
        on_iteration(0, current)

    it = 0
    for it in range(1, max_iter + 1):
        sums, counts = _update(X, labels, k)
        nonempty = counts > 0
        C = C.copy()
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            # repair: move the worst-fit point out of a cluster that can spare it
            dist = _point_distortions(X, C, labels)
            dist[counts[labels] <= 1] = -1.0
            p = int(np.argmax(dist))
            old = labels[p]
            labels[p] = j
            counts[old] -= 1
            counts[j] = 1
            C[j] = X[p]
            C[old] = X[labels == old].mean(axis=0)
        labels = assign_all(C, X, x_sq=x_sq)
        new = float(_point_distortions(X, C, labels).sum())
        trace.append(new)
        if on_iteration is not None:
            on_iteration(it, new)
        prev, current = current, new
        if current == 0.0 or prev <= 0.0 or (prev - current) / prev < tol:
            break

    return Codebook(k, X.shape[1], C, seed, it, current, tuple(trace))


def histogram_from_assignments(labels, k, wsi_id=""):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyFeatureList(f"no patches for {wsi_id or 'slide'}")
    counts = np.bincount(labels, minlength=k)
    return BofHistogram(wsi_id, counts / labels.size, int(labels.size))


def build_histogram(codebook, wsi_features):
    """L1-normalized histogram of nearest-centroid assignments for one slide."""
    feats = list(wsi_features)
    if not feats:
        raise EmptyFeatureList("empty feature list")
    ids = {f.wsi_id for f in feats}
    if len(ids) != 1:
        raise ValueError(f"features from several slides: {sorted(ids)}")
    labels = assign_all(codebook, feats)
    return histogram_from_assignments(labels, codebook.k, ids.pop())
