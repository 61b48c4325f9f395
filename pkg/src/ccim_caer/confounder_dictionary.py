"""Stratified confounder dictionary built from masked context features.

Context features are reduced with PCA, clustered with K-Means++ seeded
Lloyd iterations, and each cluster is summarised by the mean of its
members in the original feature space together with its empirical
prior ``N_i / N_m``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    NumericError,
    ParameterError,
    SizeError,
    ValidationError,
    VersionError,
)

DICT_VERSION = "ccim-dict/1"
MAX_FEATURE_DIM = 2048
DEFAULT_KMEANS_TOL = 1e-6
DEFAULT_KMEANS_MAX_ITER = 300

# dictionary sizes used for EMOTIC, CAER-S and GroupWalk
N_PRESETS = {"emotic": 256, "caer-s": 128, "groupwalk": 256}

_ZERO_VARIANCE_RTOL = 1e-12


def _as_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"expected a nonempty 2-D feature matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("feature matrix contains non-finite values")
    return x


def default_pca_dims(n_rows: int, n_cols: int) -> int:
    return min(64, n_cols, n_rows)


@dataclass
class PcaModel:
    """Centred, rotated (not whitened) linear projection.

    ``components`` holds one principal direction per row.
    ``degenerate`` flags components whose variance is numerically zero.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    degenerate: np.ndarray = field(default=None)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(features, d_p: int) -> PcaModel:
    """Fit PCA by exact SVD of the mean-centred feature matrix.

    Each component's sign is fixed so that its largest-magnitude entry is
    positive, which makes the result independent of LAPACK sign choices.
    """
    x = _as_features(features)
    n_rows, n_cols = x.shape
    if not 1 <= d_p <= min(n_rows, n_cols):
        raise DimensionError(f"d_p must lie in [1, {min(n_rows, n_cols)}], got {d_p}")
    mean = x.mean(axis=0)
    centred = x - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:d_p].copy()
    pivots = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(d_p), pivots])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    denom = max(n_rows - 1, 1)
    var = s[:d_p] ** 2 / denom
    total = float(np.sum(s**2)) / denom
    degenerate = var <= _ZERO_VARIANCE_RTOL * max(total, np.finfo(float).tiny)
    return PcaModel(mean=mean, components=comps, explained_variance=var, degenerate=degenerate)


def pca_project(model: PcaModel, features) -> np.ndarray:
    x = _as_features(features)
    if x.shape[1] != model.dim:
        raise DimensionError(f"features have {x.shape[1]} columns, PCA model expects {model.dim}")
    return (x - model.mean) @ model.components.T


def kmeanspp_init(points, n: int, seed: int) -> np.ndarray:
    """Choose ``n`` rows of ``points`` by D² sampling.

    Returns the indices of the chosen rows; use ``points[idx]`` for the
    centres. Once all remaining squared distances are zero (duplicate
    rows), the next index is drawn uniformly from the unchosen rows so
    that indices stay distinct.
    """
    x = _as_features(points)
    m = x.shape[0]
    if n < 1:
        raise SizeError(f"n must be >= 1, got {n}")
    if n > m:
        raise SizeError(f"cannot choose {n} centres from {m} points")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(m))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    taken = np.zeros(m, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, n):
        weights = np.where(taken, 0.0, d2)
        total = weights.sum()
        if total > 0.0:
            idx = int(rng.choice(m, p=weights / total))
        else:
            idx = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(idx)
        taken[idx] = True
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.asarray(chosen, dtype=np.int64)


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float]


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # direct differences rather than the expanded dot-product form: exact zeros for coincident points
    return np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)


def _assign(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = _sq_dists(x, centers)
    labels = np.argmin(d2, axis=1)
    own = d2[np.arange(x.shape[0]), labels]
    n = centers.shape[0]
    # re-seed each empty cluster with the point currently farthest from its centre
    for k in range(n):
        if np.any(labels == k):
            continue
        counts = np.bincount(labels, minlength=n)
        movable = counts[labels] > 1
        cand = np.where(movable, own, -1.0)
        far = int(np.argmax(cand))
        labels[far] = k
        own[far] = 0.0
    return labels, own


def _cluster_means(x: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((n, x.shape[1]))
    for k in range(n):
        out[k] = x[labels == k].mean(axis=0)
    return out


def _within_ss(x: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> float:
    return math.fsum(np.sum((x - centers[labels]) ** 2, axis=1))


def kmeans_fit(points, init_centers, max_iter: int = DEFAULT_KMEANS_MAX_ITER,
               tol: float = DEFAULT_KMEANS_TOL) -> ClusterAssignment:
    """Lloyd iterations from ``init_centers``.

    Stops when the largest centre displacement drops below ``tol`` or
    after ``max_iter`` iterations. ``inertia_history`` records the
    within-cluster sum of squares after every update step and is
    nonincreasing.
    """
    x = _as_features(points)
    centers = np.array(init_centers, dtype=np.float64, ndmin=2)
    if not np.all(np.isfinite(centers)):
        raise NumericError("initial centres contain non-finite values")
    n = centers.shape[0]
    if n < 1:
        raise SizeError("need at least one initial centre")
    if n > x.shape[0]:
        raise SizeError(f"{n} centres for {x.shape[0]} points")
    if centers.shape[1] != x.shape[1]:
        raise DimensionError("initial centres and points differ in dimension")
    if tol <= 0:
        raise ParameterError(f"tol must be > 0, got {tol}")
    if max_iter < 1:
        raise ParameterError(f"max_iter must be >= 1, got {max_iter}")

    history: list[float] = []
    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        labels, _ = _assign(x, centers)
        new_centers = _cluster_means(x, labels, n)
        history.append(_within_ss(x, labels, new_centers))
        shift = float(np.max(np.sqrt(np.sum((new_centers - centers) ** 2, axis=1))))
        centers = new_centers
        if shift < tol:
            break
    return ClusterAssignment(labels=labels, centers=centers, inertia=history[-1],
                             n_iter=it, inertia_history=history)


@dataclass
class ConfounderDictionary:
    """Context prototypes ``z_i`` (one per row) with priors ``P(z_i)``."""

    prototypes: np.ndarray
    priors: np.ndarray
    source: str = "clustered"

    @property
    def n(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    def validate(self, tol: float = 1e-9) -> None:
        if self.source not in ("clustered", "random"):
            raise ValidationError(f"unknown dictionary source {self.source!r}")
        if self.prototypes.ndim != 2 or self.priors.shape != (self.prototypes.shape[0],):
            raise ValidationError("priors must have one entry per prototype")
        if not (np.all(np.isfinite(self.prototypes)) and np.all(np.isfinite(self.priors))):
            raise ValidationError("dictionary contains non-finite values")
        if np.any(self.priors <= 0.0) or np.any(self.priors > 1.0):
            raise ValidationError("every prior must lie in (0, 1]")
        total = math.fsum(self.priors)
        if abs(total - 1.0) > tol:
            raise ValidationError(f"priors sum to {total!r}, not 1")

    def fingerprint(self) -> str:
        return hashlib.sha256(dictionary_to_json(self).encode()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfounderDictionary):
            return NotImplemented
        return (self.source == other.source
                and np.array_equal(self.prototypes, other.prototypes)
                and np.array_equal(self.priors, other.priors))


def dictionary_from_labels(features, labels, n: int) -> ConfounderDictionary:
    """Prototypes as member means in the original space; priors as cluster shares."""
    x = _as_features(features)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise DimensionError("need one label per feature row")
    counts = np.bincount(labels, minlength=n)
    if counts.shape[0] != n or np.any(counts == 0):
        raise SizeError("every cluster id in [0, n) must have at least one member")
    protos = _cluster_means(x, labels, n)
    priors = counts / x.shape[0]
    return ConfounderDictionary(prototypes=protos, priors=priors, source="clustered")


def build_dictionary(features, n: int, d_p: int | None = None, seed: int = 0,
                     restarts: int = 1, max_iter: int = DEFAULT_KMEANS_MAX_ITER,
                     tol: float = DEFAULT_KMEANS_TOL) -> ConfounderDictionary:
    x = _as_features(features)
    m, d = x.shape
    if d > MAX_FEATURE_DIM:
        raise DimensionError(f"feature dimension {d} exceeds {MAX_FEATURE_DIM}")
    if not 1 <= n <= m:
        raise SizeError(f"dictionary size must lie in [1, {m}], got {n}")
    if restarts < 1:
        raise ParameterError("restarts must be >= 1")
    if d_p is None:
        d_p = default_pca_dims(m, d)
    pca = pca_fit(x, d_p)
    reduced = pca_project(pca, x)

    best = None
    seeds = np.random.SeedSequence(seed).generate_state(restarts) if restarts > 1 else [seed]
    for s in seeds:
        idx = kmeanspp_init(reduced, n, int(s))
        fit = kmeans_fit(reduced, reduced[idx], max_iter=max_iter, tol=tol)
        if best is None or fit.inertia < best.inertia:
            best = fit
    return dictionary_from_labels(x, best.labels, n)


def random_dictionary(n: int, d: int, seed: int, scale: float = 1.0) -> ConfounderDictionary:
    """Gaussian prototypes with standard deviation ``scale`` and uniform priors."""
    if n < 1 or d < 1:
        raise ParameterError(f"n and d must be >= 1, got n={n}, d={d}")
    if not scale > 0:
        raise ParameterError(f"scale must be > 0, got {scale}")
    rng = np.random.default_rng(seed)
    protos = rng.normal(0.0, scale, size=(n, d))
    priors = np.full(n, 1.0 / n)
    return ConfounderDictionary(prototypes=protos, priors=priors, source="random")


def dictionary_to_json(dictionary: ConfounderDictionary) -> str:
    doc = {
        "version": DICT_VERSION,
        "n": dictionary.n,
        "d": dictionary.d,
        "source": dictionary.source,
        "priors": [float(p) for p in dictionary.priors],
        "prototypes": [[float(v) for v in row] for row in dictionary.prototypes],
    }
    return json.dumps(doc, indent=1)


def dictionary_from_json(text: str) -> ConfounderDictionary:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"dictionary file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("dictionary file must hold a JSON object")
    if "version" not in doc:
        raise VersionError("dictionary file has no version field")
    if doc["version"] != DICT_VERSION:
        raise VersionError(f"unsupported dictionary version {doc['version']!r}")
    for key in ("n", "d", "source", "priors", "prototypes"):
        if key not in doc:
            raise ValidationError(f"dictionary file is missing {key!r}")
    try:
        protos = np.array(doc["prototypes"], dtype=np.float64)
        priors = np.array(doc["priors"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"malformed dictionary arrays: {exc}") from exc
    if protos.ndim != 2 or protos.shape != (doc["n"], doc["d"]):
        raise ValidationError(f"prototypes shape {protos.shape} disagrees with n={doc['n']}, d={doc['d']}")
    out = ConfounderDictionary(prototypes=protos, priors=priors, source=doc["source"])
    out.validate()
    return out


def serialize_dictionary(dictionary: ConfounderDictionary, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dictionary_to_json(dictionary))
    os.replace(tmp, path)


def deserialize_dictionary(path) -> ConfounderDictionary:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"dictionary file not found: {path}")
    return dictionary_from_json(path.read_text())
