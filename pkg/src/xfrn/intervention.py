"""Deactivation masks, re-measurement under a mask and cross-lingual controls.

Every re-measurement runs on the held-out test pairs of a :class:`SplitPlan`;
passing the training ids of the detection that produced a mask lets the
report check that the two never overlap.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from xfrn import geometry
from xfrn.corpus import ParallelCorpus, SplitPlan, nonparallel_index_pairs
from xfrn.detector import DetectionResult
from xfrn.errors import DataError
from xfrn.geometry import SimilarityCurve
from xfrn.model import ModelAdapter
from xfrn.store import DeactivationMask

CONDITIONS = ("none", "type1", "type2", "baseline")
DEFAULT_METRICS = ("hs_parallel", "hs_nonparallel", "act_parallel", "act_nonparallel", "centroid_cos", "mutual_knn")
REMEASURE_METRICS = DEFAULT_METRICS + ("cevr_dim", "trajectory_cos", "separability_acc")


def mask_from_detection(result: DetectionResult) -> DeactivationMask:
    provenance = {"type1": "detected_type1", "type2": "detected_type2"}[result.neuron_type]
    return DeactivationMask(frozenset(result.neurons), provenance, result.split_seed)


def baseline_mask(reference: DeactivationMask, seed: int, mlp_dim: int) -> DeactivationMask:
    """Random mask with the reference's per-layer counts, disjoint from it."""
    if not reference:
        raise DataError("baseline mask needs a non-empty reference")
    rng = np.random.default_rng(seed)
    entries = set()
    for layer, idx in sorted(reference.by_layer().items()):
        count = len(idx)
        if count > mlp_dim - count:
            raise DataError(
                f"layer {layer}: reference holds {count} of {mlp_dim} neurons, "
                "too many to draw a disjoint baseline of equal size"
            )
        pool = np.setdiff1d(np.arange(mlp_dim), np.asarray(idx))
        picked = rng.choice(pool, size=count, replace=False)
        entries.update((layer, int(i)) for i in np.sort(picked))
    return DeactivationMask(frozenset(entries), "baseline_random", seed)


def capture_arrays(
    model: ModelAdapter,
    corpus: ParallelCorpus,
    languages: Sequence[str],
    pair_ids: Sequence[int],
    mask: DeactivationMask | None = None,
    batch_size: int = 64,
) -> dict[str, dict[str, np.ndarray]]:
    """Final-token captures per language, rows ordered like ``pair_ids``."""
    model.check_mask(mask)
    by_index = {p.pair_index: p for p in corpus.pairs}
    missing = [i for i in pair_ids if i not in by_index]
    if missing:
        raise DataError(f"pair ids absent from corpus: {missing[:5]}")
    out = {}
    for lang in languages:
        texts = [by_index[i].sentences[lang] for i in pair_ids]
        chunks = [model.capture(texts[s : s + batch_size], mask) for s in range(0, len(texts), batch_size)]
        out[lang] = {k: np.concatenate([c[k] for c in chunks]) for k in chunks[0]}
    return out


def compute_curves(
    caps: dict[str, dict[str, np.ndarray]],
    pair_ids: Sequence[int],
    l2: str,
    metrics: Sequence[str] = DEFAULT_METRICS,
    seed: int = 0,
    k: int = 5,
    cevr_threshold: float = 0.9,
    trajectory_m: int = 10,
    folds: int = 5,
    metadata: dict | None = None,
) -> list[SimilarityCurve]:
    """en-vs-``l2`` diagnostics from captured test arrays."""
    unknown = set(metrics) - set(REMEASURE_METRICS)
    if unknown:
        raise DataError(f"unsupported metrics: {sorted(unknown)}")
    pair_ids = list(pair_ids)
    pos = {p: i for i, p in enumerate(pair_ids)}
    non = nonparallel_index_pairs(pair_ids, seed)
    non_rows = np.array([pos[b] for _, b in non])
    en, other = caps["en"], caps[l2]
    num_layers = en["hidden_state"].shape[1]
    meta = {"pair": f"en-{l2}", **(metadata or {})}
    curves: list[SimilarityCurve] = []

    for kind, prefix in (("hidden_state", "hs"), ("mlp_activation", "act")):
        if f"{prefix}_parallel" not in metrics and f"{prefix}_nonparallel" not in metrics:
            continue
        par = [(en[kind][:, l], other[kind][:, l]) for l in range(num_layers)]
        nonp = [(en[kind][:, l], other[kind][non_rows, l]) for l in range(num_layers)]
        for c in geometry.similarity_gap_curve(par, nonp, kind, meta):
            if c.metric in metrics:
                curves.append(c)

    hs_en, hs_l2 = en["hidden_state"], other["hidden_state"]
    if "centroid_cos" in metrics:
        ca = [geometry.centroid(hs_en[:, l]) for l in range(num_layers)]
        cb = [geometry.centroid(hs_l2[:, l]) for l in range(num_layers)]
        curves.append(geometry.centroid_distance_curve(ca, cb, meta))
    if "mutual_knn" in metrics:
        kk = min(k, len(pair_ids) - 1)
        vals = [geometry.mutual_knn_alignment(hs_en[:, l], hs_l2[:, l], kk) for l in range(num_layers)]
        curves.append(SimilarityCurve("mutual_knn", vals, {**meta, "k": kk}))
    if "cevr_dim" in metrics:
        vals = [geometry.cevr_dimensionality(np.vstack([hs_en[:, l], hs_l2[:, l]]), cevr_threshold)
                for l in range(num_layers)]
        curves.append(SimilarityCurve("cevr_dim", vals, {**meta, "threshold": cevr_threshold}))
    if "trajectory_cos" in metrics:
        cents = [geometry.centroid(hs_en[:, l]) for l in range(num_layers)]
        curves.append(geometry.trajectory_linearity(cents, min(trajectory_m, num_layers), meta))
    if "separability_acc" in metrics:
        par = [np.hstack([hs_en[:, l], hs_l2[:, l]]) for l in range(num_layers)]
        nonp = [np.hstack([hs_en[:, l], hs_l2[non_rows, l]]) for l in range(num_layers)]
        curves.append(geometry.separability_probe(par, nonp, folds, seed, meta))
    return curves


def hidden_gap(curves: Sequence[SimilarityCurve]) -> float:
    """Layer-averaged parallel minus non-parallel hidden-state cosine."""
    by = {c.metric: c for c in curves}
    if "hs_parallel" not in by or "hs_nonparallel" not in by:
        raise DataError("hidden-state gap needs hs_parallel and hs_nonparallel curves")
    return float(np.nanmean(by["hs_parallel"].array() - by["hs_nonparallel"].array()))


@dataclass
class InterventionReport:
    condition: str
    language: str
    before: list[SimilarityCurve]
    after: list[SimilarityCurve]
    mask: DeactivationMask
    test_ids: list[int]
    split_seed: int
    model_id: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise DataError(f"unknown condition {self.condition!r}")

    def deltas(self) -> dict[str, list]:
        out = {}
        for b, a in zip(self.before, self.after):
            out[b.metric] = [None if x is None or y is None else y - x for x, y in zip(b.values, a.values)]
        return out

    def gap_change(self) -> float | None:
        """Relative change of the layer-averaged hidden-state gap (after vs. before)."""
        try:
            g0, g1 = hidden_gap(self.before), hidden_gap(self.after)
        except DataError:
            return None
        if g0 == 0:
            return None
        return (g1 - g0) / abs(g0)

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "language": self.language,
            "model_id": self.model_id,
            "split_seed": self.split_seed,
            "test_ids": list(self.test_ids),
            "mask": {
                "provenance": self.mask.provenance,
                "seed": self.mask.seed,
                "size": len(self.mask),
                "histogram": {str(k): v for k, v in sorted(self.mask.histogram().items())},
            },
            "gap_relative_change": self.gap_change(),
            "before": [c.to_dict() for c in self.before],
            "after": [c.to_dict() for c in self.after],
            "deltas": self.deltas(),
            "diagnostics": self.diagnostics,
        }

    def write(self, json_path, csv_path, header_lines: list[str] | None = None) -> None:
        json_path, csv_path = Path(json_path), Path(csv_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        with open(csv_path, "w", newline="") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write(f"# condition: {self.condition}\n# mask_provenance: {self.mask.provenance}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "layer", "before", "after", "delta"])
            deltas = self.deltas()
            for b, a in zip(self.before, self.after):
                for layer, x, y, d in zip(b.layers, b.values, a.values, deltas[b.metric]):
                    w.writerow([b.metric, layer, geometry._fmt(x), geometry._fmt(y), geometry._fmt(d)])


def _check_split(split: SplitPlan, detection_train_ids) -> None:
    if detection_train_ids is not None:
        leaked = set(detection_train_ids) & set(split.test_ids)
        if leaked:
            raise DataError(f"{len(leaked)} detection training ids appear in the test split")


def remeasure_under_mask(
    model: ModelAdapter,
    corpus: ParallelCorpus,
    split: SplitPlan,
    l2: str,
    mask: DeactivationMask,
    condition: str,
    metrics: Sequence[str] = DEFAULT_METRICS,
    seed: int = 0,
    detection_train_ids=None,
    **curve_kwargs,
) -> InterventionReport:
    """Test-split curves without and with ``mask``."""
    model.check_mask(mask)
    _check_split(split, detection_train_ids)
    test_ids = sorted(split.test_ids)
    if len(test_ids) < 2:
        raise DataError("the test split needs at least two pairs")
    langs = ("en", l2)
    base = capture_arrays(model, corpus, langs, test_ids)
    masked = capture_arrays(model, corpus, langs, test_ids, mask)
    before = compute_curves(base, test_ids, l2, metrics, seed, metadata={"condition": "none"}, **curve_kwargs)
    after = compute_curves(masked, test_ids, l2, metrics, seed, metadata={"condition": condition}, **curve_kwargs)
    diagnostics = {}
    if detection_train_ids is not None:
        diagnostics["detection_train_ids"] = sorted(int(i) for i in detection_train_ids)
    return InterventionReport(condition, l2, before, after, mask, test_ids, split.seed,
                              getattr(model, "model_id", ""), diagnostics)


@dataclass
class CrossLingualEffect:
    target: str  # the language whose centroid is measured
    source: str  # the language whose mask is applied
    neuron_type: str
    cross: SimilarityCurve
    reference: SimilarityCurve

    def to_rows(self) -> list[list]:
        return [[self.neuron_type, self.source, self.target, layer, geometry._fmt(x), geometry._fmt(y)]
                for layer, x, y in zip(self.cross.layers, self.cross.values, self.reference.values)]


def _centroid_cos_under(model, corpus, lang, test_ids, base_caps, mask, meta) -> SimilarityCurve:
    caps = capture_arrays(model, corpus, (lang,), test_ids, mask)[lang]["hidden_state"]
    ref = base_caps[lang]["hidden_state"]
    num_layers = ref.shape[1]
    a = [geometry.centroid(ref[:, l]) for l in range(num_layers)]
    b = [geometry.centroid(caps[:, l]) for l in range(num_layers)]
    return geometry.centroid_distance_curve(a, b, meta)


def cross_lingual_effect(
    model: ModelAdapter,
    corpus: ParallelCorpus,
    split: SplitPlan,
    l1: str,
    l2: str,
    neuron_type: str,
    masks: dict[str, DeactivationMask],
) -> CrossLingualEffect:
    """cos(C_l2 unmasked, C_l2 under l1's mask) next to the same under l2's own mask."""
    for lang in (l1, l2):
        if lang not in masks:
            raise DataError(f"no {neuron_type} mask available for {lang!r}")
        model.check_mask(masks[lang])
    test_ids = sorted(split.test_ids)
    base = capture_arrays(model, corpus, (l2,), test_ids)
    meta = {"type": neuron_type, "target": l2}
    reference = _centroid_cos_under(model, corpus, l2, test_ids, base, masks[l2], {**meta, "mask": l2})
    if l1 == l2:
        cross = SimilarityCurve(reference.metric, list(reference.values), {**meta, "mask": l1})
    else:
        cross = _centroid_cos_under(model, corpus, l2, test_ids, base, masks[l1], {**meta, "mask": l1})
    return CrossLingualEffect(l2, l1, neuron_type, cross, reference)


def write_cross_lingual_csv(effects: Sequence[CrossLingualEffect], path, header_lines: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["type", "mask_language", "target_language", "layer", "cross_cos", "own_cos"])
        for e in effects:
            w.writerows(e.to_rows())
