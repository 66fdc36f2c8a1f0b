"""Capture-and-intervene adapters for gated-MLP decoders, plus the planted fixture.

Every adapter exposes per-layer final-token reads at four points (attention
output, pre-MLP residual, gated activation, post-layer hidden state) and one
write point: the activation vector right before the down projection, where a
:class:`~xfrn.store.DeactivationMask` zeroes entries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

from xfrn.errors import ConfigError, ModelError
from xfrn.store import CAPTURE_KINDS, ActivationRecord, DeactivationMask, ModelManifest, ValueVectorTable

EOS = "</s>"
UNK = "<unk>"
NO_ANSWER = "unknown"


def boundary_layer(num_layers: int) -> int:
    """Last Type-1 candidate layer: round(0.625 * L), halves rounded up (L=32 -> 20)."""
    return int(math.floor(0.625 * num_layers + 0.5))


def type_layers(kind: str, num_layers: int) -> range:
    b = boundary_layer(num_layers)
    if kind == "type1":
        return range(1, b + 1)
    if kind == "type2":
        return range(b + 1, num_layers + 1)
    raise ConfigError(f"unknown neuron type {kind!r}; expected 'type1' or 'type2'")


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


class ModelAdapter:
    """Minimal contract: tokenize, capture with hooks, write hook on activations."""

    model_id: str
    num_layers: int
    hidden_dim: int
    mlp_dim: int
    max_context: int
    final_norm_applied: bool = False

    def manifest(self, kinds: Sequence[str] = CAPTURE_KINDS) -> ModelManifest:
        return ModelManifest(
            model_id=self.model_id,
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            mlp_dim=self.mlp_dim,
            capture_kinds=tuple(kinds),
            final_norm_applied=self.final_norm_applied,
        )

    def value_table(self) -> ValueVectorTable:
        raise NotImplementedError

    def capture(self, texts: Sequence[str], mask: DeactivationMask | None) -> dict[str, np.ndarray]:
        """Final-token captures, each array shaped ``(n, L, dim)``."""
        raise NotImplementedError

    def generate(self, prompt: str, mask: DeactivationMask | None, max_new_tokens: int) -> str:
        raise NotImplementedError

    def check_mask(self, mask: DeactivationMask | None) -> None:
        if mask is not None:
            mask.validate(self.num_layers, self.mlp_dim)


def forward_capture(
    model: ModelAdapter,
    batch: Sequence[str],
    kinds=CAPTURE_KINDS,
    mask: DeactivationMask | None = None,
    sample_ids: Sequence[str] | None = None,
    languages: Sequence[str] | None = None,
    pair_indices: Sequence[int] | None = None,
    batch_size: int = 64,
) -> Iterator[ActivationRecord]:
    """Run ``batch`` through ``model`` and yield one record per (sample, layer).

    The mask is validated before any forward pass.
    """
    kinds = tuple(k for k in CAPTURE_KINDS if k in set(kinds))
    model.check_mask(mask)
    n = len(batch)
    if n == 0:
        return
    sample_ids = list(sample_ids) if sample_ids is not None else [f"s{i:08d}" for i in range(n)]
    languages = list(languages) if languages is not None else ["und"] * n
    for start in range(0, n, batch_size):
        chunk = list(batch[start : start + batch_size])
        caps = model.capture(chunk, mask)
        for row in range(len(chunk)):
            k = start + row
            for layer in range(1, model.num_layers + 1):
                rec = ActivationRecord(
                    sample_id=sample_ids[k],
                    language=languages[k],
                    layer=layer,
                    pair_index=None if pair_indices is None else int(pair_indices[k]),
                )
                for kind in kinds:
                    setattr(rec, kind, caps[kind][row, layer - 1])
                yield rec


def generate(model: ModelAdapter, prompt: str, mask: DeactivationMask | None = None, max_new_tokens: int = 32) -> str:
    if max_new_tokens < 1:
        raise ModelError("max_new_tokens must be >= 1")
    model.check_mask(mask)
    return model.generate(prompt, mask, max_new_tokens)


# -- numpy gated-MLP model -----------------------------------------------


@dataclass
class GatedMlpLayer:
    gate: np.ndarray  # (d, d_m)
    up: np.ndarray  # (d, d_m)
    down: np.ndarray  # (d_m, d)


@dataclass
class GatedMlpModel(ModelAdapter):
    """Residual stack of SiLU-gated MLPs with a stub attention.

    The sequence is summarised by summing token embeddings into the final
    position; attention contributes nothing (``A^l = 0``), so the pre-MLP
    residual of layer l is the hidden state of layer l-1.
    """

    model_id: str
    layers: list[GatedMlpLayer]
    vocab: list[str]
    embed: np.ndarray  # (V, d)
    unembed: np.ndarray  # (V, d)
    max_context: int = 64
    _tok: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._tok = {w: i for i, w in enumerate(self.vocab)}
        self.num_layers = len(self.layers)
        self.hidden_dim = self.embed.shape[1]
        self.mlp_dim = self.layers[0].gate.shape[1]

    def tokenize(self, text: str) -> list[int]:
        unk = self._tok[UNK]
        return [self._tok.get(w, unk) for w in text.split()]

    def _embed(self, token_lists: Sequence[Sequence[int]]) -> np.ndarray:
        h = np.zeros((len(token_lists), self.hidden_dim), dtype=np.float32)
        for row, toks in enumerate(token_lists):
            if len(toks) > self.max_context:
                raise ModelError(f"input of {len(toks)} tokens exceeds max context length {self.max_context}")
            if toks:
                h[row] = self.embed[list(toks)].sum(axis=0)
        return h

    def _run(self, h: np.ndarray, mask: DeactivationMask | None, record: bool):
        L = self.num_layers
        masked = mask.by_layer() if mask else {}
        caps = None
        if record:
            n = h.shape[0]
            caps = {
                "hidden_state": np.empty((n, L, self.hidden_dim), np.float32),
                "pre_mlp": np.empty((n, L, self.hidden_dim), np.float32),
                "attention_out": np.zeros((n, L, self.hidden_dim), np.float32),
                "mlp_activation": np.empty((n, L, self.mlp_dim), np.float32),
            }
        for li, layer in enumerate(self.layers):
            pre = h  # attention stub adds zero
            alpha = silu(pre @ layer.gate) * (pre @ layer.up)
            idx = masked.get(li + 1)
            if idx:
                alpha[:, idx] = 0.0
            h = pre + alpha @ layer.down
            if record:
                caps["pre_mlp"][:, li] = pre
                caps["mlp_activation"][:, li] = alpha
                caps["hidden_state"][:, li] = h
        return h, caps

    def capture(self, texts, mask):
        h0 = self._embed([self.tokenize(t) for t in texts])
        return self._run(h0, mask, record=True)[1]

    def logits(self, tokens: Sequence[int], mask: DeactivationMask | None = None) -> np.ndarray:
        h, _ = self._run(self._embed([tokens]), mask, record=False)
        return (h @ self.unembed.T)[0]

    def generate(self, prompt, mask, max_new_tokens):
        tokens = self.tokenize(prompt)
        out = []
        eos = self._tok[EOS]
        for _ in range(max_new_tokens):
            if len(tokens) + 1 > self.max_context:
                raise ModelError(f"generation exceeds max context length {self.max_context}")
            nxt = int(np.argmax(self.logits(tokens, mask)))
            if nxt == eos:
                break
            out.append(self.vocab[nxt])
            tokens.append(nxt)
        return " ".join(out)

    def value_table(self) -> ValueVectorTable:
        return ValueVectorTable(self.model_id, {i + 1: l.down.copy() for i, l in enumerate(self.layers)})

    def save(self, path) -> None:
        arrays = {"embed": self.embed, "unembed": self.unembed}
        for i, l in enumerate(self.layers):
            arrays[f"gate{i}"], arrays[f"up{i}"], arrays[f"down{i}"] = l.gate, l.up, l.down
        meta = {"model_id": self.model_id, "vocab": self.vocab, "max_context": self.max_context}
        np.savez(path, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "GatedMlpModel":
        try:
            with np.load(path) as z:
                meta = json.loads(str(z["meta"]))
                n_layers = sum(1 for k in z.files if k.startswith("gate"))
                layers = [GatedMlpLayer(z[f"gate{i}"], z[f"up{i}"], z[f"down{i}"]) for i in range(n_layers)]
                return cls(meta["model_id"], layers, meta["vocab"], z["embed"], z["unembed"], meta["max_context"])
        except (OSError, KeyError, ValueError) as exc:
            raise ModelError(f"cannot load model weights {path}: {exc}") from None


# -- planted fixture -----------------------------------------------------


@dataclass
class PlantedFixture:
    model: GatedMlpModel
    languages: tuple[str, ...]
    # (type, language) -> set of (layer, index)
    planted: dict[tuple[str, str], frozenset]
    directions: dict[tuple[int, int], np.ndarray]
    cluster_spec: dict[str, dict]
    knowledge: dict[int, tuple[int, int]]
    n_pairs: int
    n_questions: int
    seed: int

    def ground_truth(self, kind: str, language: str) -> frozenset:
        return self.planted.get((kind, language), frozenset())

    def sentence(self, language: str, pair_index: int) -> str:
        return f"{language}:s{pair_index:05d}"

    def question(self, language: str, j: int) -> str:
        return f"{language}:q{j:04d}"

    @staticmethod
    def answer(j: int) -> str:
        return f"a{j:04d}"


def build_planted_fixture(
    seed: int,
    L: int = 8,
    d: int = 48,
    d_m: int = 64,
    languages: Sequence[str] = ("en", "ja", "ko"),
    planted_per_layer: int = 4,
    n_pairs: int = 400,
    n_questions: int = 8,
    offset_scale: float = 12.0,
    en_offset_scale: float = 2.0,
    bias: float = 2.0,
    tag_scale: float = 1.0,
    semantic_scale: float = 1.5,
    noise: float = 0.05,
    random_gate_std: float = 0.12,
    random_down_std: float = 0.004,
    schedule_ratio: float = 0.5,
) -> PlantedFixture:
    """Build a synthetic gated-MLP model with known transfer neurons.

    Each language's inputs sit at ``bias*e0 + offset_L + tag_L + semantic``.
    Planted Type-1 neurons in layers ``1..boundary`` fire on their language's
    tag and write ``-offset_L`` in equal steps, carrying every language to the
    shared point; planted Type-2 neurons in later layers write the offset back.
    Step sizes follow a geometric schedule (``schedule_ratio`` per layer):
    Type-1 removal is front-loaded and Type-2 restoration back-loaded, so
    most of the shift happens in the first and last layers.
    Knowledge neurons right after the boundary answer the fixture's QA items,
    but only when the language offset has been removed.
    """
    languages = tuple(languages)
    if d < 2:
        raise ModelError("d must be >= 2 to embed distinct clusters")
    if len(languages) < 2:
        raise ModelError("fixture needs at least two languages")
    if planted_per_layer > d_m:
        raise ModelError("planted_per_layer exceeds d_m")
    nl = len(languages)
    n_sem = d - (2 + 2 * nl + 2 * n_questions)
    if n_sem < 4:
        raise ModelError(f"d={d} too small for {nl} languages and {n_questions} questions")
    b = boundary_layer(L)
    rng = np.random.default_rng(seed)

    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    cols = iter(basis.T)
    e0, stop = next(cols), next(cols)
    off_dir = {lang: next(cols) for lang in languages}
    tag_dir = {lang: next(cols) for lang in languages}
    q_dir = [next(cols) for _ in range(n_questions)]
    a_dir = [next(cols) for _ in range(n_questions)]
    sem_basis = np.stack(list(cols))  # (n_sem, d)

    offsets = {
        lang: (en_offset_scale if lang == "en" else offset_scale) * off_dir[lang] for lang in languages
    }

    def base(lang):
        return bias * e0 + offsets[lang] + tag_scale * tag_dir[lang]

    # vocabulary
    vocab = [EOS, UNK, NO_ANSWER]
    emb = [np.zeros(d), np.zeros(d), 25.0 * stop]
    sem = rng.standard_normal((n_pairs, n_sem)) @ sem_basis * (semantic_scale / math.sqrt(n_sem))
    for lang in languages:
        eps = rng.standard_normal((n_pairs, d)) * noise
        for p in range(n_pairs):
            vocab.append(f"{lang}:s{p:05d}")
            emb.append(base(lang) + sem[p] + eps[p])
    for lang in languages:
        eps = rng.standard_normal((n_questions, d)) * noise
        for j in range(n_questions):
            vocab.append(f"{lang}:q{j:04d}")
            emb.append(base(lang) + semantic_scale * q_dir[j] + eps[j])
    for j in range(n_questions):
        vocab.append(PlantedFixture.answer(j))
        emb.append(25.0 * stop)
    embed = np.stack(emb).astype(np.float32)
    unembed = np.zeros_like(embed)
    tok = {w: i for i, w in enumerate(vocab)}
    unembed[tok[EOS]] = stop
    unembed[tok[NO_ANSWER]] = 1.0 * e0
    for j in range(n_questions):
        unembed[tok[PlantedFixture.answer(j)]] = a_dir[j]

    # random background neurons
    layers = []
    for _ in range(L):
        layers.append(
            GatedMlpLayer(
                gate=rng.standard_normal((d, d_m)) * random_gate_std,
                up=rng.standard_normal((d, d_m)) * random_gate_std,
                down=rng.standard_normal((d_m, d)) * random_down_std,
            )
        )

    kappa, margin = 12.0, tag_scale / 2
    fire = float(silu(np.array(kappa * margin)))
    planted: dict[tuple[str, str], set] = {}
    directions = {}
    used = {l: set() for l in range(1, L + 1)}

    def take(layer, count):
        free = np.array(sorted(set(range(d_m)) - used[layer]))
        chosen = rng.choice(free, size=count, replace=False)
        used[layer].update(int(i) for i in chosen)
        return [int(i) for i in chosen]

    def plant(layer, idx, lang, direction, gain):
        lay = layers[layer - 1]
        lay.gate[:, idx] = kappa * (tag_dir[lang] - (margin / bias) * e0)
        lay.up[:, idx] = e0 / bias
        lay.down[idx] = gain * direction
        directions[(layer, idx)] = direction.copy()

    w1 = schedule_ratio ** np.arange(b)
    w1 /= w1.sum()
    w2 = schedule_ratio ** np.arange(L - b)[::-1]
    w2 /= max(w2.sum(), 1e-12)
    if planted_per_layer > 0:
        for lang in languages:
            mag = np.linalg.norm(offsets[lang])
            unit = offsets[lang] / mag
            for layer in range(1, L + 1):
                if len(used[layer]) + planted_per_layer > d_m:
                    raise ModelError("d_m too small for the requested planted neurons")
                kind = "type1" if layer <= b else "type2"
                if kind == "type1":
                    direction, share = -unit, w1[layer - 1]
                else:
                    direction, share = unit, w2[layer - b - 1]
                gain = mag * share / planted_per_layer / fire
                for idx in take(layer, planted_per_layer):
                    plant(layer, idx, lang, direction, gain)
                    planted.setdefault((kind, lang), set()).add((layer, idx))

    # knowledge neurons: answer j fires only when no language offset remains
    knowledge = {}
    k_layer = min(b + 1, L)
    if n_questions and len(used[k_layer]) + n_questions <= d_m:
        kk, thr, lam = 8.0, semantic_scale / 2, 0.15
        penalty = sum(off_dir.values())
        for j, idx in enumerate(take(k_layer, n_questions)):
            lay = layers[k_layer - 1]
            lay.gate[:, idx] = kk * (q_dir[j] - (thr / bias) * e0 - lam * penalty)
            lay.up[:, idx] = e0 / bias
            lay.down[idx] = a_dir[j]
            knowledge[j] = (k_layer, idx)

    for lay in layers:
        lay.gate = lay.gate.astype(np.float32)
        lay.up = lay.up.astype(np.float32)
        lay.down = lay.down.astype(np.float32)

    model = GatedMlpModel(f"planted-fixture-s{seed}", layers, vocab, embed, unembed)
    cluster_spec = {
        lang: {"mean": base(lang).tolist(), "cov_scale": noise, "semantic_scale": semantic_scale}
        for lang in languages
    }
    return PlantedFixture(
        model=model,
        languages=languages,
        planted={k: frozenset(v) for k, v in planted.items()},
        directions=directions,
        cluster_spec=cluster_spec,
        knowledge=knowledge,
        n_pairs=n_pairs,
        n_questions=n_questions,
        seed=seed,
    )


def fixture_corpus(fixture: PlantedFixture, n: int | None = None):
    from xfrn.corpus import ParallelCorpus, ParallelPair

    n = fixture.n_pairs if n is None else min(n, fixture.n_pairs)
    pairs = [ParallelPair(p, {lang: fixture.sentence(lang, p) for lang in fixture.languages}) for p in range(n)]
    return ParallelCorpus(pairs, fixture.languages)


def fixture_qa(fixture: PlantedFixture, languages: Sequence[str] | None = None):
    from xfrn.corpus import QaDataset, QaItem

    items = []
    for lang in languages or fixture.languages:
        for j in range(fixture.n_questions):
            items.append(QaItem(f"{lang}-q{j:04d}", lang, fixture.question(lang, j), [fixture.answer(j)]))
    return QaDataset(items)


# -- loading from config -------------------------------------------------


def load_adapter(config_path) -> ModelAdapter:
    """Build an adapter from a JSON adapter config.

    ``family`` selects the implementation: ``"fixture"`` rebuilds the planted
    fixture from its seed and dims, ``"numpy"`` loads a saved
    :class:`GatedMlpModel`, anything else goes to the Hugging Face adapter.
    """
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"adapter config not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    family = cfg.get("family", "fixture")
    if family == "fixture":
        params = dict(cfg.get("fixture", {}))
        seed = int(params.pop("seed", 0))
        return build_planted_fixture(seed, **params).model
    if family == "numpy":
        weights = Path(cfg["weights"])
        if not weights.is_absolute():
            weights = path.parent / weights
        return GatedMlpModel.load(weights)
    from xfrn.hf import HfGatedAdapter

    return HfGatedAdapter.from_config(cfg)


def fixture_from_config(config_path) -> PlantedFixture | None:
    cfg = json.loads(Path(config_path).read_text())
    if cfg.get("family", "fixture") != "fixture":
        return None
    params = dict(cfg.get("fixture", {}))
    seed = int(params.pop("seed", 0))
    return build_planted_fixture(seed, **params)
