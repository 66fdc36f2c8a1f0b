"""Parallel corpora, QA datasets, splits and pairings."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xfrn.errors import DataError

log = logging.getLogger(__name__)


@dataclass
class ParallelPair:
    pair_index: int
    sentences: dict[str, str]


@dataclass
class ParallelCorpus:
    pairs: list[ParallelPair]
    languages: tuple[str, ...]
    dropped: int = 0

    def __post_init__(self):
        seen = set()
        for pair in self.pairs:
            if "en" not in pair.sentences:
                raise DataError(f"pair {pair.pair_index} has no English side")
            if pair.pair_index in seen:
                raise DataError(f"duplicate pair_index {pair.pair_index}")
            seen.add(pair.pair_index)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def pair_indices(self) -> list[int]:
        return [p.pair_index for p in self.pairs]

    def subset(self, pair_indices) -> "ParallelCorpus":
        wanted = set(pair_indices)
        return ParallelCorpus([p for p in self.pairs if p.pair_index in wanted], self.languages)

    def sentences(self, language: str) -> list[tuple[int, str]]:
        return [(p.pair_index, p.sentences[language]) for p in self.pairs]

    def sample(self, n: int, seed: int) -> "ParallelCorpus":
        """Seeded subsample of ``n`` pairs, order preserved."""
        if n >= len(self.pairs):
            return self
        rng = np.random.default_rng(seed)
        keep = set(rng.choice(len(self.pairs), size=n, replace=False).tolist())
        return ParallelCorpus([p for i, p in enumerate(self.pairs) if i in keep], self.languages, self.dropped)


def sample_id(language: str, pair_index: int) -> str:
    return f"{language}-{pair_index:08d}"


def load_parallel_tsv(path, languages) -> ParallelCorpus:
    """Read a UTF-8 TSV whose header row names language codes.

    Rows with an empty cell in any requested language are dropped and counted
    in ``ParallelCorpus.dropped``. An optional ``pair_index`` column supplies
    ids; otherwise the data-row number is used.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus not found: {path}")
    languages = list(dict.fromkeys(["en", *languages]))
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = reader.fieldnames or []
        if "en" not in header:
            raise DataError(f"{path}: header has no 'en' column")
        missing = [lang for lang in languages if lang not in header]
        if missing:
            raise DataError(f"{path}: header lacks requested languages {missing}")
        pairs = []
        dropped = 0
        for row_no, row in enumerate(reader):
            cells = {lang: (row.get(lang) or "").strip() for lang in languages}
            if any(not cell for cell in cells.values()):
                dropped += 1
                continue
            idx = int(row["pair_index"]) if row.get("pair_index") else row_no
            pairs.append(ParallelPair(idx, cells))
    if dropped:
        log.info("%s: dropped %d rows with empty cells", path, dropped)
    return ParallelCorpus(pairs, tuple(languages), dropped)


def write_parallel_tsv(corpus: ParallelCorpus, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar="\\")
        writer.writerow(["pair_index", *corpus.languages])
        for p in corpus.pairs:
            writer.writerow([p.pair_index, *(p.sentences[lang] for lang in corpus.languages)])


@dataclass
class QaItem:
    question_id: str
    language: str
    question: str
    answers: list[str]


@dataclass
class QaDataset:
    items: list[QaItem] = field(default_factory=list)

    def __post_init__(self):
        for item in self.items:
            if not item.answers:
                raise DataError(f"question {item.question_id!r} has no gold answers")

    def __len__(self) -> int:
        return len(self.items)

    def for_language(self, language: str) -> "QaDataset":
        return QaDataset([it for it in self.items if it.language == language])

    @property
    def languages(self) -> list[str]:
        return sorted({it.language for it in self.items})


def load_qa_jsonl(path) -> QaDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"QA dataset not found: {path}")
    items = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                items.append(
                    QaItem(str(obj["question_id"]), obj["language"], obj["question"], [str(a) for a in obj["answers"]])
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: bad QA record ({exc})") from None
    return QaDataset(items)


def write_qa_jsonl(dataset: QaDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for it in dataset.items:
            rec = {"question_id": it.question_id, "language": it.language, "question": it.question, "answers": it.answers}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise DataError("train and test ids overlap")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train_ids": list(self.train_ids), "test_ids": list(self.test_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(tuple(d["train_ids"]), tuple(d["test_ids"]), int(d["seed"]))


def split_50_50(ids, seed: int) -> SplitPlan:
    """Seeded shuffle into two halves; an odd extra id goes to train."""
    ids = list(ids)
    if not ids:
        raise DataError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise DataError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = (len(ids) + 1) // 2
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return SplitPlan(tuple(train), tuple(test), seed)


def derangement(n: int, seed: int) -> np.ndarray:
    """Seeded uniform permutation of ``range(n)`` with no fixed points."""
    if n < 2:
        raise DataError(f"no derangement exists for n={n}")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def make_nonparallel_pairs(corpus: ParallelCorpus, l2: str, seed: int) -> list[tuple[str, str]]:
    """Pair every English sentence with an L2 sentence from another pair."""
    if len(corpus) < 2:
        raise DataError("need at least 2 pairs to build non-parallel pairs")
    perm = derangement(len(corpus), seed)
    out = []
    for i, j in enumerate(perm):
        a, b = corpus.pairs[i], corpus.pairs[j]
        if a.pair_index == b.pair_index:
            raise AssertionError("derangement produced a fixed point")
        out.append((a.sentences["en"], b.sentences[l2]))
    return out


def nonparallel_index_pairs(pair_indices, seed: int) -> list[tuple[int, int]]:
    """Same derangement as :func:`make_nonparallel_pairs`, over pair indices."""
    pair_indices = list(pair_indices)
    perm = derangement(len(pair_indices), seed)
    return [(pair_indices[i], pair_indices[j]) for i, j in enumerate(perm)]
