"""Neuron statistics: correlation ratio, set overlap and hypothesis tests."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sps

from xfrn.errors import DataError
from xfrn.geometry import SimilarityCurve

SIGNIFICANCE = 0.05
ETA_THRESHOLDS = (0.1, 0.25)
EXACT_MWU_LIMIT = 400


@dataclass
class HypothesisResult:
    statistic: float
    p_value: float
    n_per_group: tuple[int, ...]
    method: str = ""
    flag: str = ""


def _group(values, labels):
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    if values.ndim != 1 or values.shape != labels.shape:
        raise DataError("values and labels must be 1-D and of equal length")
    if values.size < 2:
        raise DataError("need at least two observations")
    cats = np.unique(labels)
    if cats.size < 2:
        raise DataError("correlation ratio needs at least two distinct labels")
    return values, labels, cats


def sums_of_squares(values, labels) -> tuple[float, float]:
    """Between-group and within-group sums of squares."""
    values, labels, cats = _group(values, labels)
    grand = values.mean()
    s_b = s_w = 0.0
    for c in cats:
        g = values[labels == c]
        mu = g.mean()
        s_b += g.size * (mu - grand) ** 2
        s_w += float(((g - mu) ** 2).sum())
    return float(s_b), float(s_w)


def correlation_ratio(values, labels) -> float:
    """eta^2 = S_B / (S_W + S_B); 0 when every value is identical."""
    s_b, s_w = sums_of_squares(values, labels)
    total = s_b + s_w
    if total <= 0:
        return 0.0
    return min(max(s_b / total, 0.0), 1.0)


def correlation_ratio_matrix(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """eta^2 of every column of ``values`` (n, m) against one label vector."""
    x = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    cats = np.unique(labels)
    if cats.size < 2:
        raise DataError("need at least two distinct labels")
    centred = x - x.mean(axis=0)
    total = (centred**2).sum(axis=0)
    s_b = np.zeros(x.shape[1])
    for c in cats:
        g = centred[labels == c]
        s_b += g.shape[0] * g.mean(axis=0) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        eta = np.where(total > 0, s_b / np.where(total > 0, total, 1.0), 0.0)
    return np.clip(eta, 0.0, 1.0)


def jaccard(set_a, set_b) -> float:
    a, b = set(set_a), set(set_b)
    if not a and not b:
        raise DataError("Jaccard index of two empty sets is undefined")
    return len(a & b) / len(a | b)


def overlap_by_layer(results: dict, pairing, num_layers: int | None = None) -> list[SimilarityCurve]:
    """Per-layer Jaccard of each language pair's selected neurons.

    ``results`` maps language -> DetectionResult; ``pairing`` is a list of
    ``(lang_a, lang_b)``. Layers where both selections are empty are None.
    """
    models = {(r.model_id, r.top_n) for r in results.values()}
    if len({m for m, _ in models}) > 1:
        raise DataError(f"results come from different models: {sorted(m for m, _ in models)}")
    if len({n for _, n in models}) > 1:
        raise DataError("results use different top_n")
    if num_layers is None:
        num_layers = max((l for r in results.values() for l, _ in r.neurons), default=0)
    curves = []
    for a, b in pairing:
        sa, sb = results[a].neuron_set(), results[b].neuron_set()
        vals = []
        for layer in range(1, num_layers + 1):
            la = {n for n in sa if n[0] == layer}
            lb = {n for n in sb if n[0] == layer}
            vals.append(None if not la and not lb else jaccard(la, lb))
        meta = {"pair": f"{a}-{b}", "type": results[a].neuron_type, "top_n": results[a].top_n}
        curves.append(SimilarityCurve("overlap_jaccard", vals, meta))
    return curves


def anova_oneway(groups) -> HypothesisResult:
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise DataError("ANOVA needs at least two groups")
    if any(g.ndim != 1 or g.size < 2 for g in groups):
        raise DataError("every ANOVA group needs at least two values")
    n = sum(g.size for g in groups)
    k = len(groups)
    grand = np.concatenate(groups).mean()
    s_b = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    s_w = sum(((g - g.mean()) ** 2).sum() for g in groups)
    sizes = tuple(int(g.size) for g in groups)
    if s_w == 0:
        if s_b == 0:
            return HypothesisResult(0.0, 1.0, sizes, "anova", "constant")
        return HypothesisResult(math.inf, 0.0, sizes, "anova", "zero_within_variance")
    f = (s_b / (k - 1)) / (s_w / (n - k))
    return HypothesisResult(float(f), float(sps.f.sf(f, k - 1, n - k)), sizes, "anova")


def midranks(x: np.ndarray) -> np.ndarray:
    return sps.rankdata(x, method="average")


def mann_whitney_u_statistic(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ranks = midranks(np.concatenate([a, b]))
    return float(ranks[: a.size].sum() - a.size * (a.size + 1) / 2)


def _exact_u_pvalue(ranks2: np.ndarray, n_a: int, r_obs2: int) -> float:
    """Two-sided exact p from the permutation distribution of doubled rank sums.

    Counts, by subset-sum DP, the ways to pick ``n_a`` of the pooled
    (doubled, hence integer) midranks with each total.
    """
    total = int(ranks2.sum())
    counts = np.zeros((n_a + 1, total + 1), dtype=np.float64)
    counts[0, 0] = 1.0
    for r in ranks2:
        r = int(r)
        counts[1:, r:] += counts[:-1, : total + 1 - r].copy()
    dist = counts[n_a]
    dist = dist / dist.sum()
    lower = dist[: r_obs2 + 1].sum()
    upper = dist[r_obs2:].sum()
    return float(min(1.0, 2 * min(lower, upper)))


def mann_whitney_u(a, b) -> HypothesisResult:
    """U for ``a`` with midrank ties and a two-sided p-value.

    Exact when ``|a|*|b| <= 400`` (ties handled in the permutation
    distribution); otherwise the tie-corrected normal approximation with
    continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("Mann-Whitney U needs two non-empty samples")
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = midranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    if n1 * n2 <= EXACT_MWU_LIMIT:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        p = _exact_u_pvalue(ranks2, n1, int(ranks2[:n1].sum()))
        return HypothesisResult(u, p, (n1, n2), "exact")
    n = n1 + n2
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float((tie_counts**3 - tie_counts).sum())
    sigma = math.sqrt(n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1))))
    mu = n1 * n2 / 2.0
    if sigma == 0:
        return HypothesisResult(u, 1.0, (n1, n2), "normal", "constant")
    z = (abs(u - mu) - 0.5) / sigma
    p = float(min(1.0, 2 * sps.norm.sf(max(z, 0.0))))
    return HypothesisResult(u, p, (n1, n2), "normal")


def significant_fraction(scores, thresholds=ETA_THRESHOLDS, alpha: float = SIGNIFICANCE) -> dict[float, float]:
    """Fraction of ``(eta2, p)`` entries with eta2 > threshold and p < alpha."""
    scores = list(scores)
    if not scores:
        raise DataError("significant_fraction needs at least one entry")
    out = {}
    for t in thresholds:
        hits = sum(1 for eta, p in scores if eta > t and p < alpha)
        out[t] = hits / len(scores)
    return out


@dataclass
class NeuronSpecificity:
    layer: int
    index: int
    eta2: float
    anova_p: float
    mwu_p: float


def neuron_specificity(activations: np.ndarray, labels: np.ndarray, neurons) -> list[NeuronSpecificity]:
    """eta^2, ANOVA p and Mann-Whitney p for each ``(layer, index)``.

    ``activations`` maps layer -> ``(n, d_m)`` matrix sharing one binary
    label vector.
    """
    labels = np.asarray(labels)
    out = []
    for layer, idx in neurons:
        x = np.asarray(activations[layer][:, idx], dtype=np.float64)
        g1, g0 = x[labels == 1], x[labels == 0]
        eta = correlation_ratio(x, labels)
        an = anova_oneway([g1, g0])
        mw = mann_whitney_u(g1, g0)
        out.append(NeuronSpecificity(layer, idx, eta, an.p_value, mw.p_value))
    return out


def family_labels(languages, label_map: dict[str, str], target_family: str) -> np.ndarray:
    """Binary labels: 1 where a sample's language maps to ``target_family``."""
    try:
        return np.array([int(label_map[lang] == target_family) for lang in languages])
    except KeyError as exc:
        raise DataError(f"language {exc} missing from family label map") from None


DEFAULT_FAMILIES = {"en": "germanic-romance", "nl": "germanic-romance", "it": "germanic-romance",
                    "ja": "japonic-koreanic", "ko": "japonic-koreanic"}


def write_table_csv(rows: dict[str, dict[str, float]], columns, path, header_lines=None) -> None:
    """Table with one row per neuron type and one column per language."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", *columns])
        for name, vals in rows.items():
            w.writerow([name, *("nan" if vals.get(c) is None else repr(float(vals[c])) for c in columns)])
