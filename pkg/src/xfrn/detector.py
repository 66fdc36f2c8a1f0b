"""Transfer-neuron scoring and selection.

For a candidate neuron ``i`` in layer ``l`` with pre-MLP residual ``x_k`` of
sample ``k``, activation ``a_ik`` and value row ``v_i``::

    layer score   L_k  = cos(x_k, C^l)
    neuron score  N_ik = cos(x_k + a_ik * v_i, C^l)
    transfer score S_i = mean_k (N_ik - L_k)

``C^l`` is the shared centroid (English/L2 midpoint) for Type-1 neurons and
the L2 centroid for Type-2 neurons. Candidates are ranked globally across the
type's layer range.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xfrn import geometry
from xfrn.errors import DataError
from xfrn.model import type_layers
from xfrn.store import CaptureRun, ValueVectorTable, load_aligned, load_slice, rows_for_pairs

log = logging.getLogger(__name__)

# Squared norms at or below this count as the zero vector.
_ZERO = 1e-24


def layer_score(pre_mlp: np.ndarray, centroid: np.ndarray) -> float:
    return geometry.cosine(np.asarray(pre_mlp, float), np.asarray(centroid, float))


def neuron_score(pre_mlp: np.ndarray, alpha: float, value: np.ndarray, centroid: np.ndarray) -> float:
    moved = np.asarray(pre_mlp, float) + float(alpha) * np.asarray(value, float)
    return geometry.cosine(moved, np.asarray(centroid, float))


@dataclass
class LayerScores:
    scores: np.ndarray  # (d_m,) NaN where no valid sample remains
    valid: np.ndarray  # (d_m,) samples used per neuron
    excluded_zero: np.ndarray  # (d_m,) samples dropped for a zero moved vector


def score_layer(pre_mlp: np.ndarray, alpha: np.ndarray, values: np.ndarray, target: np.ndarray) -> LayerScores:
    """Vectorised transfer scores of every neuron in one layer.

    ``pre_mlp`` is ``(n, d)``, ``alpha`` ``(n, d_m)``, ``values`` ``(d_m, d)``.
    """
    x = np.asarray(pre_mlp, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    c = np.asarray(target, dtype=np.float64)
    c_norm = np.linalg.norm(c)
    if c_norm == 0:
        raise DataError("target centroid is the zero vector")
    if x.shape[0] != a.shape[0] or a.shape[1] != v.shape[0] or v.shape[1] != x.shape[1]:
        raise DataError(f"shape mismatch: pre {x.shape}, alpha {a.shape}, values {v.shape}")
    xx = np.einsum("nd,nd->n", x, x)
    xc = x @ c
    ok_x = xx > _ZERO
    base = np.where(ok_x, xc / (np.sqrt(np.where(ok_x, xx, 1.0)) * c_norm), 0.0)

    xv = x @ v.T  # (n, d_m)
    vv = np.einsum("md,md->m", v, v)
    vc = v @ c
    num = xc[:, None] + a * vc[None, :]
    sq = xx[:, None] + 2 * a * xv + a * a * vv[None, :]
    ok = (sq > _ZERO) & ok_x[:, None]
    moved = np.where(ok, num / (np.sqrt(np.where(ok, sq, 1.0)) * c_norm), 0.0)
    diff = np.where(ok, moved - base[:, None], 0.0)
    valid = ok.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(valid > 0, diff.sum(axis=0) / np.maximum(valid, 1), np.nan)
    excluded = (ok_x[:, None] & ~ok).sum(axis=0)
    return LayerScores(scores, valid, excluded)


def transfer_score(pre_mlp: np.ndarray, alpha: np.ndarray, value: np.ndarray, centroid: np.ndarray) -> float:
    """Score of a single neuron from its per-sample activations ``alpha`` (n,)."""
    res = score_layer(pre_mlp, np.asarray(alpha, float)[:, None], np.asarray(value, float)[None, :], centroid)
    return float(res.scores[0])


@dataclass
class NeuronScoreRow:
    layer: int
    index: int
    score: float
    rank: int
    target: str


def rank_neurons(scores: dict[int, np.ndarray]) -> list[tuple[int, int, float]]:
    """Sort ``(layer, index, score)`` by score desc, then layer asc, index asc.

    Undefined (NaN) scores go last.
    """
    layers, idx, vals = [], [], []
    for layer in sorted(scores):
        s = np.asarray(scores[layer], dtype=np.float64)
        layers.append(np.full(s.shape, layer))
        idx.append(np.arange(s.size))
        vals.append(s)
    if not vals:
        return []
    layers = np.concatenate(layers)
    idx = np.concatenate(idx)
    vals = np.concatenate(vals)
    undefined = np.isnan(vals)
    key = np.where(undefined, 0.0, -vals)
    order = np.lexsort((idx, layers, key, undefined))
    return [(int(layers[o]), int(idx[o]), float(vals[o])) for o in order]


@dataclass
class DetectionResult:
    ranked: list[NeuronScoreRow]
    target: str  # "to_shared" or "to_language:<code>"
    neuron_type: str
    language: str
    model_id: str
    population: int
    candidate_count: int
    top_n: int
    train_ids: list[int] = field(default_factory=list)
    split_seed: int | None = None
    truncated: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def neurons(self) -> list[tuple[int, int]]:
        return [(r.layer, r.index) for r in self.ranked]

    def neuron_set(self) -> frozenset:
        return frozenset(self.neurons)

    @property
    def fraction_of_population(self) -> float:
        return len(self.ranked) / self.population

    def provenance(self) -> dict:
        return {
            "model_id": self.model_id,
            "split_seed": self.split_seed,
            "language": self.language,
            "type": self.neuron_type,
            "top_n": self.top_n,
        }

    def to_dict(self) -> dict:
        return {
            **self.provenance(),
            "target": self.target,
            "population": self.population,
            "candidate_count": self.candidate_count,
            "selected": len(self.ranked),
            "fraction_of_population": self.fraction_of_population,
            "warning_top_n_exceeds_candidates": self.truncated,
            "train_ids": list(self.train_ids),
            "diagnostics": self.diagnostics,
            "ranked": [[r.layer, r.index, r.score, r.rank] for r in self.ranked],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionResult":
        target = d["target"]
        rows = [NeuronScoreRow(int(l), int(i), float(s), int(r), target) for l, i, s, r in d["ranked"]]
        return cls(
            ranked=rows,
            target=target,
            neuron_type=d["type"],
            language=d["language"],
            model_id=d["model_id"],
            population=int(d["population"]),
            candidate_count=int(d["candidate_count"]),
            top_n=int(d["top_n"]),
            train_ids=list(d.get("train_ids", [])),
            split_seed=d.get("split_seed"),
            truncated=bool(d.get("warning_top_n_exceeds_candidates", False)),
            diagnostics=d.get("diagnostics", {}),
        )

    def write(self, csv_path, json_path, header_lines: list[str] | None = None) -> None:
        csv_path, json_path = Path(csv_path), Path(json_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            for k, v in self.provenance().items():
                fh.write(f"# {k}: {v}\n")
            if self.truncated:
                fh.write("# warning: top_n exceeds candidate count\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "index", "score", "rank"])
            for r in self.ranked:
                w.writerow([r.layer, r.index, repr(r.score), r.rank])
        json_path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, json_path) -> "DetectionResult":
        path = Path(json_path)
        if not path.exists():
            raise DataError(f"detection result not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


def target_centroids(run: CaptureRun, language: str, neuron_type: str, layers, pair_indices=None) -> dict[int, np.ndarray]:
    out = {}
    for layer in layers:
        if neuron_type == "type1":
            en, l2, _ = load_aligned(run, layer, "hidden_state", "en", language, pair_indices)
            out[layer] = geometry.centroid_shared(en, l2)
        else:
            pairs = sorted(run.pair_indices(language)) if pair_indices is None else sorted(pair_indices)
            out[layer] = geometry.centroid(rows_for_pairs(run, layer, "hidden_state", language, pairs))
    return out


def _score_all(run, values, language, neuron_type, pair_indices=None):
    m = run.manifest
    layers = type_layers(neuron_type, m.num_layers)
    cents = target_centroids(run, language, neuron_type, layers, pair_indices)
    pairs = sorted(run.pair_indices(language)) if pair_indices is None else sorted(pair_indices)
    scores, diag = {}, {"excluded_zero_samples": {}, "samples": None}
    for layer in layers:
        pre = rows_for_pairs(run, layer, "pre_mlp", language, pairs)
        alpha = rows_for_pairs(run, layer, "mlp_activation", language, pairs)
        if pre.shape[0] == 0:
            raise DataError(f"no {language!r} samples in run")
        res = score_layer(pre, alpha, values.layer(layer), cents[layer])
        scores[layer] = res.scores
        diag["samples"] = int(pre.shape[0])
        excluded = int(res.excluded_zero.sum())
        if excluded:
            diag["excluded_zero_samples"][str(layer)] = excluded
    return scores, diag


def detect_transfer_neurons(run: CaptureRun, values: ValueVectorTable, language: str, neuron_type: str,
                            top_n: int, pair_indices=None, split_seed: int | None = None) -> DetectionResult:
    """Score every candidate in the type's layer range and keep the top ``top_n``."""
    if top_n < 1:
        raise DataError("top_n must be >= 1")
    if neuron_type == "type1" and language == "en":
        raise DataError("Type-1 detection needs a non-English language (the shared centroid pairs en with it)")
    m = run.manifest
    scores, diag = _score_all(run, values, language, neuron_type, pair_indices)
    ranked = rank_neurons(scores)
    candidates = len(ranked)
    truncated = top_n > candidates
    if truncated:
        log.warning("top_n=%d exceeds %d candidates; returning all", top_n, candidates)
    target = "to_shared" if neuron_type == "type1" else f"to_language:{language}"
    rows = [NeuronScoreRow(l, i, s, r + 1, target) for r, (l, i, s) in enumerate(ranked[:top_n])]
    train_ids = sorted(pair_indices) if pair_indices is not None else sorted(run.pair_indices(language))
    return DetectionResult(
        ranked=rows,
        target=target,
        neuron_type=neuron_type,
        language=language,
        model_id=m.model_id,
        population=m.population,
        candidate_count=candidates,
        top_n=top_n,
        train_ids=train_ids,
        split_seed=split_seed if split_seed is not None else run.meta.get("split_seed"),
        truncated=truncated,
        diagnostics=diag,
    )


def per_layer_top(result_scores: dict[int, np.ndarray], k: int) -> set[tuple[int, int]]:
    """Top-k neurons within each layer (same tie order as the global ranking)."""
    out = set()
    for layer, s in result_scores.items():
        ranked = rank_neurons({layer: s})[:k]
        out.update((l, i) for l, i, _ in ranked)
    return out


def all_scores(run: CaptureRun, values: ValueVectorTable, language: str, neuron_type: str,
               pair_indices=None) -> dict[int, np.ndarray]:
    return _score_all(run, values, language, neuron_type, pair_indices)[0]


@dataclass
class LanguageSpecificNeurons:
    target: str
    threshold: float
    neurons: list[tuple[int, int, float]]  # (layer, index, eta2)
    histogram: dict[int, int]


def detect_language_specific_neurons(runs, target: str, threshold: float) -> LanguageSpecificNeurons:
    """Neurons whose activations separate ``target`` from all other languages.

    ``runs`` is one :class:`CaptureRun` or a list of them; every language in
    them contributes samples, labelled 1 for ``target`` and 0 otherwise.
    """
    from xfrn.stats import correlation_ratio_matrix

    runs = runs if isinstance(runs, (list, tuple)) else [runs]
    langs = sorted({lang for r in runs for lang in r.languages})
    if len(langs) < 2:
        raise DataError("language-specific detection needs at least two languages")
    if target not in langs:
        raise DataError(f"target language {target!r} not captured")
    m = runs[0].manifest
    found = []
    hist = {}
    for layer in range(1, m.num_layers + 1):
        blocks, labels = [], []
        for r in runs:
            for lang in r.languages:
                act = load_slice(r, layer, "mlp_activation", lang)
                blocks.append(act)
                labels.append(np.full(len(act), int(lang == target)))
        eta = correlation_ratio_matrix(np.vstack(blocks), np.concatenate(labels))
        hits = np.flatnonzero(eta >= threshold)
        hist[layer] = int(hits.size)
        found.extend((layer, int(i), float(eta[i])) for i in hits)
    found.sort(key=lambda t: (-t[2], t[0], t[1]))
    return LanguageSpecificNeurons(target, threshold, found, hist)
