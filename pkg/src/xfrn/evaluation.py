"""Zero-shot QA harness: token-level F1 and the three-condition mask protocol."""

from __future__ import annotations

import csv
import json
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from xfrn.corpus import QaDataset
from xfrn.errors import DataError
from xfrn.model import ModelAdapter
from xfrn.store import DeactivationMask

log = logging.getLogger(__name__)

CHARACTER_LANGUAGES = frozenset({"ja", "ko", "zh"})
ANSWER_PROMPTS = {
    "en": "Answer:",
    "nl": "Antwoord:",
    "it": "Risposta:",
    "de": "Antwort:",
    "fr": "Réponse:",
    "es": "Respuesta:",
    "ja": "答え:",
    "ko": "답:",
    "zh": "答案:",
}
THRESHOLDS = (0.5, 0.8)
PROTOCOL_CONDITIONS = ("none", "type1", "baseline")
MAX_NEW_TOKENS = 32


def normalize_tokens(text: str, language: str = "en") -> list[str]:
    """Lowercase, drop Unicode punctuation, split on whitespace.

    Japanese, Korean and Chinese text is split into single characters.
    """
    text = unicodedata.normalize("NFKC", text).lower()
    text = "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in text)
    if language.split("-")[0] in CHARACTER_LANGUAGES:
        return [ch for ch in text if not ch.isspace()]
    return text.split()


def _f1(pred: list[str], gold: list[str]) -> float:
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    common = sum((Counter(pred) & Counter(gold)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(gold)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, golds: list[str], language: str = "en") -> float:
    """Best token-multiset F1 of ``prediction`` against any gold answer.

    >>> token_f1("paris", ["paris"])
    1.0
    >>> round(token_f1("the red fox", ["a red dog"]), 6)
    0.333333
    >>> token_f1("alpha beta", ["gamma"])
    0.0
    """
    if not golds:
        raise DataError("token_f1 needs at least one gold answer")
    pred = normalize_tokens(prediction, language)
    return max(_f1(pred, normalize_tokens(g, language)) for g in golds)


def build_prompt(question: str, language: str, prompts: Mapping[str, str] | None = None) -> str:
    table = {**ANSWER_PROMPTS, **(prompts or {})}
    return f"{question}\n{table.get(language, table['en'])}"


def extract_answer(generated: str) -> str:
    """First non-empty line of the generation."""
    for line in generated.splitlines():
        if line.strip():
            return line.strip()
    return ""


@dataclass
class QaResult:
    question_id: str
    language: str
    condition: str
    generated: str
    f1: float
    error: str = ""


@dataclass
class DeltaRow:
    language: str
    threshold: float | None  # None: unfiltered
    n_questions: int
    mean_none: float | None
    delta: dict[str, float | None]


@dataclass
class DeltaReport:
    rows: list[DeltaRow]
    conditions: tuple[str, ...]
    thresholds: tuple[float, ...]

    def get(self, language: str, threshold: float | None) -> DeltaRow:
        for r in self.rows:
            if r.language == language and r.threshold == threshold:
                return r
        raise KeyError((language, threshold))

    def to_dict(self) -> dict:
        return {
            "conditions": list(self.conditions),
            "thresholds": list(self.thresholds),
            "rows": [
                {"language": r.language, "threshold": r.threshold, "n_questions": r.n_questions,
                 "mean_none": r.mean_none, "delta": r.delta}
                for r in self.rows
            ],
        }


@dataclass
class QaProtocolOutput:
    results: list[QaResult]
    report: DeltaReport
    masks: dict = field(default_factory=dict)

    def scores(self, condition: str) -> dict[str, float]:
        return {r.question_id: r.f1 for r in self.results if r.condition == condition}

    def scatter(self, condition: str) -> list[tuple[str, str, float, float]]:
        """``(question_id, language, none-F1, condition-F1)`` per question."""
        base = {r.question_id: r for r in self.results if r.condition == "none"}
        return [(r.question_id, r.language, base[r.question_id].f1, r.f1)
                for r in self.results if r.condition == condition]

    def write(self, out_dir, header_lines: list[str] | None = None) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = "".join(f"# {line}\n" for line in header_lines or [])
        paths = {"results": out / "qa_results.csv", "report": out / "qa_delta.json"}
        with open(paths["results"], "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["question_id", "language", "condition", "f1", "generated", "error"])
            for r in self.results:
                w.writerow([r.question_id, r.language, r.condition, repr(float(r.f1)), r.generated, r.error])
        paths["report"].write_text(json.dumps(self.report.to_dict(), indent=1, sort_keys=True) + "\n")
        for cond in self.report.conditions:
            if cond == "none":
                continue
            p = out / f"qa_scatter_{cond}.csv"
            with open(p, "w", newline="") as fh:
                fh.write(header)
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["question_id", "language", "x_none_f1", "y_condition_f1"])
                for qid, lang, x, y in self.scatter(cond):
                    w.writerow([qid, lang, repr(float(x)), repr(float(y))])
            paths[f"scatter_{cond}"] = p
        return paths


def _mask_for(entry, language: str) -> DeactivationMask | None:
    if entry is None or isinstance(entry, DeactivationMask):
        return entry
    if language not in entry:
        raise DataError(f"no mask for language {language!r}")
    return entry[language]


def _mean(xs) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


def delta_report(results: list[QaResult], conditions, thresholds=THRESHOLDS) -> DeltaReport:
    """Condition minus no-intervention mean F1 over one fixed question set per filter."""
    by_cond = {c: {r.question_id: r for r in results if r.condition == c} for c in conditions}
    base = by_cond["none"]
    rows = []
    for lang in sorted({r.language for r in base.values()}):
        ids = [q for q, r in base.items() if r.language == lang]
        for t in (None, *thresholds):
            kept = sorted(q for q in ids if t is None or base[q].f1 > t)
            mean_none = _mean([base[q].f1 for q in kept])
            delta = {}
            for c in conditions:
                if c == "none":
                    continue
                m = _mean([by_cond[c][q].f1 for q in kept])
                delta[c] = None if m is None else m - mean_none
            rows.append(DeltaRow(lang, t, len(kept), mean_none, delta))
    return DeltaReport(rows, tuple(conditions), tuple(thresholds))


def run_qa_protocol(
    dataset: QaDataset,
    model: ModelAdapter,
    masks: Mapping[str, object],
    thresholds=THRESHOLDS,
    max_new_tokens: int = MAX_NEW_TOKENS,
    prompts: Mapping[str, str] | None = None,
) -> QaProtocolOutput:
    """Greedy zero-shot answers with no mask and under each supplied mask.

    ``masks`` maps a condition (``type1``, ``baseline``) to either one
    :class:`DeactivationMask` or a per-language mapping of masks.
    """
    if len(dataset) == 0:
        raise DataError("QA dataset is empty")
    conditions = ("none", *[c for c in PROTOCOL_CONDITIONS[1:] if c in masks])
    extra = set(masks) - set(PROTOCOL_CONDITIONS)
    if extra:
        raise DataError(f"unknown QA conditions: {sorted(extra)}")
    for cond in conditions[1:]:
        for lang in dataset.languages:
            model.check_mask(_mask_for(masks[cond], lang))
    results = []
    for cond in conditions:
        for item in dataset.items:
            mask = None if cond == "none" else _mask_for(masks[cond], item.language)
            prompt = build_prompt(item.question, item.language, prompts)
            try:
                generated = extract_answer(model.generate(prompt, mask, max_new_tokens))
            except Exception as exc:  # recorded per question, never dropped
                log.warning("generation failed for %s under %s: %s", item.question_id, cond, exc)
                results.append(QaResult(item.question_id, item.language, cond, "", 0.0, type(exc).__name__))
                continue
            results.append(QaResult(item.question_id, item.language, cond, generated,
                                    token_f1(generated, item.answers, item.language)))
    return QaProtocolOutput(results, delta_report(results, conditions, thresholds), dict(masks))
