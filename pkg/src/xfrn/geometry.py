"""Latent-space diagnostics over per-layer hidden states and activations."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xfrn.errors import DataError

METRICS = (
    "hs_parallel",
    "hs_nonparallel",
    "act_parallel",
    "act_nonparallel",
    "centroid_cos",
    "mutual_knn",
    "cevr_dim",
    "trajectory_cos",
    "separability_acc",
    "overlap_jaccard",
)


@dataclass
class SimilarityCurve:
    """One scalar per layer. ``None`` marks an undefined layer.

    ``first_layer`` is 1 for every metric except trajectory_cos, which starts
    at layer 2.
    """

    metric: str
    values: list
    metadata: dict = field(default_factory=dict)
    first_layer: int = 1

    def __post_init__(self):
        if self.metric not in METRICS:
            raise DataError(f"unknown metric {self.metric!r}")
        self.values = [None if v is None or (isinstance(v, float) and math.isnan(v)) else v for v in self.values]

    @property
    def layers(self) -> list[int]:
        return list(range(self.first_layer, self.first_layer + len(self.values)))

    def array(self) -> np.ndarray:
        return np.array([np.nan if v is None else v for v in self.values], dtype=float)

    def mean(self) -> float:
        return float(np.nanmean(self.array()))

    def to_dict(self) -> dict:
        return {"metric": self.metric, "first_layer": self.first_layer, "values": self.values, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityCurve":
        return cls(d["metric"], list(d["values"]), dict(d.get("metadata", {})), int(d.get("first_layer", 1)))


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_curves_csv(curves: list[SimilarityCurve], path, header_lines: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "value", "metric", "metadata"])
        for c in curves:
            meta = json.dumps(c.metadata, sort_keys=True, separators=(",", ":"))
            for layer, v in zip(c.layers, c.values):
                w.writerow([layer, _fmt(v), c.metric, meta])


def read_curves_csv(path) -> list[SimilarityCurve]:
    groups: dict[tuple[str, str], list] = {}
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in rows:
            key = (row["metric"], row["metadata"])
            groups.setdefault(key, []).append((int(row["layer"]), row["value"]))
    out = []
    for (metric, meta), items in groups.items():
        items.sort()
        vals = [None if v == "nan" else (int(v) if metric == "cevr_dim" else float(v)) for _, v in items]
        out.append(SimilarityCurve(metric, vals, json.loads(meta), items[0][0]))
    return out


# -- primitives ----------------------------------------------------------


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DataError("cosine of a zero vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


def centroid(hidden: np.ndarray) -> np.ndarray:
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise DataError("centroid needs a non-empty n x d matrix")
    return hidden.mean(axis=0)


def centroid_shared(en: np.ndarray, l2: np.ndarray) -> np.ndarray:
    """Mean over aligned pairs of the per-pair midpoint."""
    en = np.asarray(en, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    if en.shape != l2.shape or en.ndim != 2 or en.shape[0] == 0:
        raise DataError(f"aligned matrices required, got {en.shape} and {l2.shape}")
    return ((en + l2) / 2.0).mean(axis=0)


def cevr(hidden: np.ndarray) -> np.ndarray:
    """Cumulative explained variance ratio over the nonzero singular values."""
    sigma = np.linalg.svd(np.asarray(hidden, dtype=np.float64), compute_uv=False)
    tol = sigma.max(initial=0.0) * max(hidden.shape) * np.finfo(float).eps
    sigma = sigma[sigma > tol]
    if sigma.size == 0:
        raise DataError("matrix has no nonzero singular values")
    energy = sigma**2
    return np.cumsum(energy) / energy.sum()


def smallest_k(ratios: np.ndarray, threshold: float) -> int:
    # 1e-12 slack so exact-threshold spectra (e.g. 2 of 4 equal values at 0.5)
    # are not lost to rounding.
    return int(np.argmax(ratios >= threshold - 1e-12)) + 1


def cevr_dimensionality(hidden: np.ndarray, threshold: float) -> int:
    if not 0 < threshold <= 1:
        raise DataError(f"threshold must lie in (0, 1], got {threshold}")
    hidden = np.asarray(hidden)
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise DataError("cevr_dimensionality needs a non-empty n x d matrix")
    return smallest_k(cevr(hidden), threshold)


def _row_cosines(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    return cos, int((~ok).sum())


def mean_pair_cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    """Mean cosine of row pairs; pairs with a zero vector are skipped and counted."""
    cos, skipped = _row_cosines(a, b)
    if cos.size == 0:
        raise DataError("every pair contains a zero vector")
    return float(cos.mean()), skipped


def similarity_gap_curve(parallel: list[tuple[np.ndarray, np.ndarray]],
                         nonparallel: list[tuple[np.ndarray, np.ndarray]],
                         kind: str = "hidden_state", metadata: dict | None = None):
    """Per-layer mean cosine for parallel and non-parallel pairs.

    ``parallel[l]`` and ``nonparallel[l]`` hold the two aligned ``(n, dim)``
    matrices of layer ``l+1``.
    """
    if not parallel or not nonparallel:
        raise DataError("both pair lists must be non-empty")
    prefix = {"hidden_state": "hs", "mlp_activation": "act"}.get(kind)
    if prefix is None:
        raise DataError(f"kind must be hidden_state or mlp_activation, got {kind!r}")
    meta = dict(metadata or {})
    par, non, skipped = [], [], 0
    for (a, b), (c, d) in zip(parallel, nonparallel):
        if a.shape[1] != b.shape[1] or c.shape[1] != d.shape[1]:
            raise DataError("pair vectors must have matching dims")
        v, s1 = mean_pair_cosine(a, b)
        w, s2 = mean_pair_cosine(c, d)
        par.append(v)
        non.append(w)
        skipped += s1 + s2
    meta["skipped_pairs"] = skipped
    return (
        SimilarityCurve(f"{prefix}_parallel", par, dict(meta)),
        SimilarityCurve(f"{prefix}_nonparallel", non, dict(meta)),
    )


def _similarity_matrix(x: np.ndarray, metric: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DataError("zero vector in k-NN input")
        u = x / norms
        return u @ u.T
    if metric == "euclidean":
        sq = (x**2).sum(axis=1)
        return -(sq[:, None] + sq[None, :] - 2 * x @ x.T)
    raise DataError(f"unknown distance {metric!r}")


def knn_sets(x: np.ndarray, k: int, metric: str = "cosine") -> np.ndarray:
    """Indices of each row's k nearest other rows; ties go to the lower index."""
    sim = _similarity_matrix(x, metric)
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")
    return order[:, :k]


def mutual_knn_alignment(phi: np.ndarray, psi: np.ndarray, k: int, metric: str = "cosine") -> float:
    phi = np.asarray(phi)
    psi = np.asarray(psi)
    if phi.ndim != 2 or phi.shape[0] != psi.shape[0]:
        raise DataError("phi and psi must have the same number of rows")
    b = phi.shape[0]
    if b < 2:
        raise DataError("need at least two rows")
    if not 1 <= k <= b - 1:
        raise DataError(f"k must lie in [1, {b - 1}], got {k}")
    a_sets = knn_sets(phi, k, metric)
    b_sets = knn_sets(psi, k, metric)
    hits = [len(set(a_sets[i]) & set(b_sets[i])) for i in range(b)]
    return float(np.mean(hits) / k)


def centroid_distance_curve(centroids_a: list[np.ndarray], centroids_b: list[np.ndarray],
                            metadata: dict | None = None) -> SimilarityCurve:
    """cos(C_a^l, C_b^l) per layer."""
    vals = []
    for ca, cb in zip(centroids_a, centroids_b):
        if not np.any(ca) or not np.any(cb):
            raise DataError("zero centroid")
        vals.append(cosine(ca, cb))
    return SimilarityCurve("centroid_cos", vals, dict(metadata or {}))


def trajectory_linearity(centroids: list[np.ndarray], m: int = 10, metadata: dict | None = None) -> SimilarityCurve:
    """cos(C^l - C^{l-1}, C^m - C^1) for l = 2..m; ``centroids[0]`` is layer 1."""
    if not 2 <= m <= len(centroids):
        raise DataError(f"m must lie in [2, {len(centroids)}], got {m}")
    c = [np.asarray(x, dtype=np.float64) for x in centroids]
    path = c[m - 1] - c[0]
    vals = []
    for l in range(2, m + 1):
        step = c[l - 1] - c[l - 2]
        if not np.any(path) or not np.any(step):
            vals.append(None)
        else:
            vals.append(cosine(step, path))
    meta = {"m": m, **(metadata or {})}
    return SimilarityCurve("trajectory_cos", vals, meta, first_layer=2)


def separability_probe(parallel: list[np.ndarray], nonparallel: list[np.ndarray], folds: int = 10,
                       seed: int = 0, metadata: dict | None = None) -> SimilarityCurve:
    """Stratified k-fold accuracy of a logistic-regression probe per layer.

    ``parallel[l]`` is ``(n1, 2d)``: concatenated hidden states of each pair.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedKFold

    if folds < 2:
        raise DataError("folds must be >= 2")
    accs = []
    for pos, neg in zip(parallel, nonparallel):
        if len(pos) < folds or len(neg) < folds:
            raise DataError(f"each class needs at least {folds} samples")
        x = np.vstack([pos, neg]).astype(np.float64)
        y = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
        skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
        scores = []
        for tr, te in skf.split(x, y):
            clf = LogisticRegression(max_iter=2000)
            clf.fit(x[tr], y[tr])
            scores.append(clf.score(x[te], y[te]))
        accs.append(float(np.mean(scores)))
    return SimilarityCurve("separability_acc", accs, {"folds": folds, "seed": seed, **(metadata or {})})


@dataclass
class PcaProjection:
    layer: int
    components: np.ndarray  # (2, d)
    coords: np.ndarray  # (n, 2)
    labels: list[str]
    explained_variance: np.ndarray  # top-2 variance fractions
    degenerate: bool = False


def pca_project(hidden_by_language: dict[str, np.ndarray], layer: int) -> PcaProjection:
    """Joint 2-D PCA of all languages at one layer (mean-centred, unscaled)."""
    labels = []
    blocks = []
    for lang in sorted(hidden_by_language):
        x = np.asarray(hidden_by_language[lang], dtype=np.float64)
        blocks.append(x)
        labels.extend([lang] * len(x))
    data = np.vstack(blocks)
    if data.shape[0] < 3:
        raise DataError("PCA needs at least 3 pooled rows")
    centred = data - data.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros_like(comps[0])])
    tol = s.max(initial=0.0) * max(centred.shape) * np.finfo(float).eps
    degenerate = len(s) < 2 or s[1] <= tol
    total = (s**2).sum()
    ev = (s[:2] ** 2) / total if total > 0 else np.zeros(2)
    return PcaProjection(layer, comps, centred @ comps.T, labels, ev, degenerate)


def write_pca_csv(proj: PcaProjection, path, header_lines: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "language", "pc1", "pc2"])
        for lang, (x, y) in zip(proj.labels, proj.coords):
            w.writerow([proj.layer, lang, repr(float(x)), repr(float(y))])
