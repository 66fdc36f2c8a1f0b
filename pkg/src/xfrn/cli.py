"""Command-line pipeline: extract, detect, intervene, stats, evaluate, report.

Every command reads one JSON experiment config and writes into its output
directory. Each CSV begins with ``#`` provenance lines (config hash, seeds,
mask provenance) and carries no timestamps, so identical configs reproduce
identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xfrn import __version__, geometry
from xfrn.corpus import SplitPlan, load_parallel_tsv, load_qa_jsonl, sample_id, split_50_50, write_parallel_tsv, write_qa_jsonl
from xfrn.detector import DetectionResult, detect_language_specific_neurons, detect_transfer_neurons
from xfrn.errors import ConfigError, DataError, XfrnError
from xfrn.evaluation import THRESHOLDS as QA_THRESHOLDS
from xfrn.evaluation import run_qa_protocol
from xfrn.intervention import (
    REMEASURE_METRICS,
    baseline_mask,
    compute_curves,
    cross_lingual_effect,
    mask_from_detection,
    remeasure_under_mask,
    write_cross_lingual_csv,
)
from xfrn.model import build_planted_fixture, fixture_corpus, fixture_qa, forward_capture, load_adapter
from xfrn.stats import (
    DEFAULT_FAMILIES,
    ETA_THRESHOLDS,
    family_labels,
    neuron_specificity,
    overlap_by_layer,
    significant_fraction,
    write_table_csv,
)
from xfrn.store import (
    CaptureRun,
    open_capture_run,
    read_mask_csv,
    read_values,
    rows_for_pairs,
    write_capture_run,
    write_mask_csv,
    write_values,
)

log = logging.getLogger("xfrn")

TYPES = ("type1", "type2")
REPORT_METRICS = REMEASURE_METRICS + ("neuron_distribution", "qa_scatter")
DEFAULT_REPORT_METRICS = (
    "hs_parallel", "hs_nonparallel", "act_parallel", "act_nonparallel", "centroid_cos", "mutual_knn",
    "cevr_dim", "trajectory_cos", "neuron_distribution", "qa_scatter",
)


@dataclass
class ExperimentConfig:
    model: Path
    corpus: Path
    languages: tuple[str, ...]
    out: Path
    qa: Path | None = None
    split_seed: int = 0
    seed: int = 0
    top_n: int = 32
    max_pairs: int | None = None
    eta_thresholds: tuple[float, ...] = ETA_THRESHOLDS
    qa_thresholds: tuple[float, ...] = QA_THRESHOLDS
    language_specific_threshold: float = 0.25
    metrics: tuple[str, ...] = DEFAULT_REPORT_METRICS
    k: int = 5
    batch_size: int = 64
    max_new_tokens: int = 32
    families: dict = field(default_factory=lambda: dict(DEFAULT_FAMILIES))
    prompts: dict = field(default_factory=dict)
    digest: str = ""

    @property
    def l2_languages(self) -> list[str]:
        return [lang for lang in self.languages if lang != "en"]

    def header(self, command: str, **extra) -> list[str]:
        lines = [f"xfrn {__version__} {command}", f"config_sha256: {self.digest}",
                 f"split_seed: {self.split_seed}", f"seed: {self.seed}"]
        lines += [f"{k}: {v}" for k, v in extra.items()]
        return lines


def _int(raw: dict, key: str, default=None, minimum: int | None = None):
    value = raw.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"config field {key!r} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"config field {key!r} must be >= {minimum}, got {value}")
    return value


def _path(raw: dict, key: str, base: Path, required: bool = True) -> Path | None:
    value = raw.get(key)
    if value is None:
        if required:
            raise ConfigError(f"config is missing {key!r}")
        return None
    p = Path(value)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise ConfigError(f"{key} path does not exist: {p}")
    return p


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse and validate an experiment config; relative paths resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base = path.parent
    languages = raw.get("languages")
    if not isinstance(languages, list) or not all(isinstance(x, str) for x in languages):
        raise ConfigError("config field 'languages' must be a list of language codes")
    languages = tuple(dict.fromkeys(["en", *languages]))
    if len(languages) < 2:
        raise ConfigError("config needs English plus at least one other language")
    metrics = tuple(raw.get("metrics", DEFAULT_REPORT_METRICS))
    unknown = set(metrics) - set(REPORT_METRICS)
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {list(REPORT_METRICS)}")
    thresholds = raw.get("thresholds", {})
    out = raw.get("out", "out")
    out = Path(out) if Path(out).is_absolute() else base / out
    hashed = {k: v for k, v in raw.items() if k != "out"}
    digest = hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()[:16]
    try:
        cfg = ExperimentConfig(
            model=_path(raw, "model", base),
            corpus=_path(raw, "corpus", base),
            qa=_path(raw, "qa", base, required=False),
            languages=languages,
            out=out,
            split_seed=_int(raw, "split_seed", 0),
            seed=_int(raw, "seed", 0),
            top_n=_int(raw, "top_n", 32, minimum=1),
            max_pairs=_int(raw, "max_pairs", None, minimum=4),
            eta_thresholds=tuple(float(t) for t in thresholds.get("eta", ETA_THRESHOLDS)),
            qa_thresholds=tuple(float(t) for t in thresholds.get("qa", QA_THRESHOLDS)),
            language_specific_threshold=float(thresholds.get("language_specific", 0.25)),
            metrics=metrics,
            k=_int(raw, "k", 5, minimum=1),
            batch_size=_int(raw, "batch_size", 64, minimum=1),
            max_new_tokens=_int(raw, "max_new_tokens", 32, minimum=1),
            families=dict(raw.get("families", DEFAULT_FAMILIES)),
            prompts=dict(raw.get("prompts", {})),
            digest=digest,
        )
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    return cfg


# -- output layout ---------------------------------------------------------


def _runs(cfg) -> Path:
    return cfg.out / "runs"


def _split_path(cfg) -> Path:
    return _runs(cfg) / "split.json"


def _read_split(cfg) -> SplitPlan:
    p = _split_path(cfg)
    if not p.exists():
        raise DataError(f"split file not found: {p} (run 'xfrn extract' first)")
    return SplitPlan.from_dict(json.loads(p.read_text()))


def _open_run(cfg, name: str) -> CaptureRun:
    return open_capture_run(_runs(cfg) / f"{name}.xfrn")


def _detection_path(cfg, neuron_type: str, lang: str) -> Path:
    return cfg.out / "detect" / f"{neuron_type}_{lang}.json"


def _load_detections(cfg, types, langs) -> dict[tuple[str, str], DetectionResult]:
    found = {}
    for t, lang in itertools.product(types, langs):
        p = _detection_path(cfg, t, lang)
        if p.exists():
            found[(t, lang)] = DetectionResult.read(p)
    return found


def _seeds(cfg, n: int) -> list[int]:
    """Per-use seeds drawn from the command's single generator."""
    rng = np.random.default_rng(cfg.seed)
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def _corpus(cfg):
    corpus = load_parallel_tsv(cfg.corpus, cfg.l2_languages)
    if cfg.max_pairs is not None:
        corpus = corpus.sample(cfg.max_pairs, cfg.split_seed)
    if len(corpus) < 4:
        raise DataError(f"corpus {cfg.corpus} has {len(corpus)} usable pairs; need at least 4")
    return corpus


# -- commands --------------------------------------------------------------


def cmd_extract(cfg: ExperimentConfig) -> list[Path]:
    model = load_adapter(cfg.model)
    corpus = _corpus(cfg)
    split = split_50_50(corpus.pair_indices, cfg.split_seed)
    by_index = {p.pair_index: p for p in corpus.pairs}
    written = []
    for name, ids in (("train", split.train_ids), ("test", split.test_ids)):
        texts, sids, langs, pidx = [], [], [], []
        for lang in cfg.languages:
            for i in ids:
                texts.append(by_index[i].sentences[lang])
                sids.append(sample_id(lang, i))
                langs.append(lang)
                pidx.append(i)
        records = forward_capture(model, texts, sample_ids=sids, languages=langs, pair_indices=pidx,
                                  batch_size=cfg.batch_size)
        path = _runs(cfg) / f"{name}.xfrn"
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"split": name, "split_seed": cfg.split_seed, "config_sha256": cfg.digest}
        write_capture_run(model.manifest(), records, path, meta)
        written.append(path)
    values = _runs(cfg) / "values.xfrn"
    write_values(model.value_table(), values, {"config_sha256": cfg.digest})
    _split_path(cfg).write_text(json.dumps(split.to_dict(), sort_keys=True) + "\n")
    written += [values, _split_path(cfg)]
    log.info("captured %d train and %d test pairs over %d languages", len(split.train_ids),
             len(split.test_ids), len(cfg.languages))
    return written


def cmd_detect(cfg: ExperimentConfig, types, langs) -> list[Path]:
    run = _open_run(cfg, "train")
    values = read_values(_runs(cfg) / "values.xfrn")
    split = _read_split(cfg)
    written = []
    for t, lang in itertools.product(types, langs):
        if t == "type1" and lang == "en" and len(langs) > 1:
            continue
        res = detect_transfer_neurons(run, values, lang, t, cfg.top_n, split_seed=split.seed)
        leaked = set(res.train_ids) & set(split.test_ids)
        if leaked:
            raise DataError(f"detection used {len(leaked)} test-split pairs")
        header = cfg.header("detect", type=t, language=lang)
        csv_path = _detection_path(cfg, t, lang).with_suffix(".csv")
        res.write(csv_path, _detection_path(cfg, t, lang), header)
        mask_path = cfg.out / "masks" / f"{t}_{lang}.csv"
        write_mask_csv(mask_from_detection(res), mask_path, header)
        written += [csv_path, mask_path]
        log.info("%s %s: kept %d of %d candidates", t, lang, len(res.ranked), res.candidate_count)
    return written


def cmd_intervene(cfg: ExperimentConfig, types, langs, mask_path: Path | None = None) -> list[Path]:
    model = load_adapter(cfg.model)
    corpus = _corpus(cfg)
    split = _read_split(cfg)
    metrics = tuple(dict.fromkeys(("hs_parallel", "hs_nonparallel",
                                   *(m for m in cfg.metrics if m in REMEASURE_METRICS))))
    out = cfg.out / "intervene"
    written = []
    if mask_path is not None:
        if len(types) != 1 or len(langs) != 1:
            raise ConfigError("--mask needs exactly one --type and one --lang")
        mask = read_mask_csv(mask_path)
        rep = remeasure_under_mask(model, corpus, split, langs[0], mask, types[0], metrics, cfg.seed, k=cfg.k)
        stem = out / f"custom_{types[0]}_{langs[0]}"
        rep.write(stem.with_suffix(".json"), stem.with_suffix(".csv"),
                  cfg.header("intervene", mask=str(mask_path), mask_provenance=mask.provenance))
        return [stem.with_suffix(".json"), stem.with_suffix(".csv")]
    detections = _load_detections(cfg, types, langs)
    if not detections:
        raise DataError(f"no detection results under {cfg.out / 'detect'} (run 'xfrn detect' first)")
    seeds = iter(_seeds(cfg, len(detections)))
    masks: dict[str, dict[str, object]] = {t: {} for t in types}
    for (t, lang), res in sorted(detections.items()):
        mask = mask_from_detection(res)
        masks[t][lang] = mask
        base = baseline_mask(mask, next(seeds), model.mlp_dim)
        write_mask_csv(base, cfg.out / "masks" / f"baseline_{t}_{lang}.csv", cfg.header("intervene", reference=f"{t}_{lang}"))
        for cond, m in ((t, mask), ("baseline", base)):
            rep = remeasure_under_mask(model, corpus, split, lang, m, cond, metrics, cfg.seed,
                                       detection_train_ids=res.train_ids, k=cfg.k)
            stem = out / (f"{t}_{lang}" if cond == t else f"baseline_{t}_{lang}")
            header = cfg.header("intervene", type=t, language=lang, mask_provenance=m.provenance,
                                mask_seed=m.seed)
            rep.write(stem.with_suffix(".json"), stem.with_suffix(".csv"), header)
            written += [stem.with_suffix(".json"), stem.with_suffix(".csv")]
            log.info("%s %s under %s mask: relative gap change %s", t, lang, cond, rep.gap_change())
    for t in types:
        avail = sorted(masks[t])
        if len(avail) < 2:
            continue
        effects = [cross_lingual_effect(model, corpus, split, l1, l2, t, masks[t])
                   for l1, l2 in itertools.product(avail, avail)]
        p = out / f"cross_lingual_{t}.csv"
        write_cross_lingual_csv(effects, p, cfg.header("intervene", type=t))
        written.append(p)
    return written


def _pooled_activations(run: CaptureRun, layers):
    langs = run.languages
    pairs = {lang: sorted(run.pair_indices(lang)) for lang in langs}
    acts = {l: np.vstack([rows_for_pairs(run, l, "mlp_activation", lang, pairs[lang]) for lang in langs])
            for l in layers}
    labels = [lang for lang in langs for _ in pairs[lang]]
    return acts, labels


def cmd_stats(cfg: ExperimentConfig, types, langs) -> list[Path]:
    run = _open_run(cfg, "test")
    detections = _load_detections(cfg, types, langs)
    out = cfg.out / "stats"
    written = []
    for t in types:
        have = sorted(lang for (tt, lang) in detections if tt == t)
        pairs = list(itertools.combinations(have, 2))
        if pairs:
            curves = overlap_by_layer({l: detections[(t, l)] for l in have}, pairs, run.manifest.num_layers)
            p = out / f"overlap_{t}.csv"
            geometry.write_curves_csv(curves, p, cfg.header("stats", type=t))
            written.append(p)
    if detections:
        layers = sorted({l for res in detections.values() for l, _ in res.neurons})
        acts, sample_langs = _pooled_activations(run, layers)
        table: dict[str, dict[str, float]] = {}
        for (t, lang), res in sorted(detections.items()):
            fam = cfg.families.get(lang)
            if fam and all(x in cfg.families for x in sample_langs) and \
                    len({cfg.families[x] for x in sample_langs}) > 1:
                labels, scheme = family_labels(sample_langs, cfg.families, fam), f"family:{fam}"
            else:
                labels, scheme = np.array([int(x == lang) for x in sample_langs]), f"language:{lang}"
            per_neuron = neuron_specificity(acts, labels, res.neurons)
            p = out / f"specificity_{t}_{lang}.csv"
            p.parent.mkdir(parents=True, exist_ok=True)
            with open(p, "w", newline="") as fh:
                for line in cfg.header("stats", type=t, language=lang, labels=scheme):
                    fh.write(f"# {line}\n")
                fh.write("layer,index,eta2,anova_p,mwu_p\n")
                for s in per_neuron:
                    fh.write(f"{s.layer},{s.index},{s.eta2!r},{s.anova_p!r},{s.mwu_p!r}\n")
            written.append(p)
            frac = significant_fraction([(s.eta2, s.mwu_p) for s in per_neuron], cfg.eta_thresholds)
            for thr, v in frac.items():
                table.setdefault(f"{t}_eta>{thr}", {})[lang] = v
        p = out / "significant_fraction.csv"
        write_table_csv(table, sorted({l for _, l in detections}), p, cfg.header("stats"))
        written.append(p)
    for lang in langs:
        found = detect_language_specific_neurons(run, lang, cfg.language_specific_threshold)
        p = out / f"language_specific_{lang}.csv"
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", newline="") as fh:
            for line in cfg.header("stats", language=lang, threshold=cfg.language_specific_threshold):
                fh.write(f"# {line}\n")
            fh.write("layer,index,eta2\n")
            for layer, idx, eta in found.neurons:
                fh.write(f"{layer},{idx},{eta!r}\n")
        written.append(p)
    return written


def cmd_evaluate(cfg: ExperimentConfig, langs) -> list[Path]:
    if cfg.qa is None:
        raise ConfigError("config has no 'qa' dataset path")
    model = load_adapter(cfg.model)
    dataset = load_qa_jsonl(cfg.qa)
    type1, base = {}, {}
    for lang in langs:
        p, b = cfg.out / "masks" / f"type1_{lang}.csv", cfg.out / "masks" / f"baseline_type1_{lang}.csv"
        if p.exists() and b.exists():
            type1[lang], base[lang] = read_mask_csv(p), read_mask_csv(b)
    keep = [it for it in dataset.items if it.language in type1]
    if not keep:
        raise DataError("no QA items in a language with Type-1 and baseline masks (run detect and intervene)")
    dataset = type(dataset)(keep)
    result = run_qa_protocol(dataset, model, {"type1": type1, "baseline": base}, cfg.qa_thresholds,
                             cfg.max_new_tokens, cfg.prompts)
    paths = result.write(cfg.out / "evaluate", cfg.header("evaluate"))
    return list(paths.values())


def _run_arrays(run: CaptureRun, langs, pair_ids) -> dict:
    L = run.manifest.num_layers
    out = {}
    for lang in langs:
        out[lang] = {kind: np.stack([rows_for_pairs(run, l, kind, lang, pair_ids) for l in range(1, L + 1)], axis=1)
                     for kind in ("hidden_state", "mlp_activation")}
    return out


def cmd_report(cfg: ExperimentConfig, langs) -> list[Path]:
    from xfrn import report

    metrics = set(cfg.metrics)
    if not metrics:
        return []
    out = cfg.out / "report"
    written: list[Path] = []
    geo = [m for m in REMEASURE_METRICS if m in metrics]
    if geo:
        run = _open_run(cfg, "test")
        for lang in langs:
            pairs = sorted(set(run.pair_indices("en")) & set(run.pair_indices(lang)))
            caps = _run_arrays(run, ("en", lang), pairs)
            curves = compute_curves(caps, pairs, lang, geo, cfg.seed, k=cfg.k)
            by = {c.metric: c for c in curves}
            groups = {
                "similarity_hs": ["hs_parallel", "hs_nonparallel"],
                "similarity_act": ["act_parallel", "act_nonparallel"],
                "centroid_cos": ["centroid_cos"], "mutual_knn": ["mutual_knn"], "cevr_dim": ["cevr_dim"],
                "trajectory_cos": ["trajectory_cos"], "separability_acc": ["separability_acc"],
            }
            for name, members in groups.items():
                sel = [by[m] for m in members if m in by]
                if sel:
                    written += report.plot_curves(sel, out / f"{name}_en-{lang}.png", f"{name} en-{lang}",
                                                  header_lines=cfg.header("report", pair=f"en-{lang}"))
        for t in TYPES:
            for lang in langs:
                p = cfg.out / "intervene" / f"{t}_{lang}.json"
                if not p.exists():
                    continue
                curves = []
                for cond_file in (p, cfg.out / "intervene" / f"baseline_{t}_{lang}.json"):
                    if cond_file.exists():
                        d = json.loads(cond_file.read_text())
                        if not curves:
                            curves += [geometry.SimilarityCurve.from_dict(c) for c in d["before"]
                                       if c["metric"].startswith("hs_")]
                        curves += [geometry.SimilarityCurve.from_dict(c) for c in d["after"]
                                   if c["metric"].startswith("hs_")]
                written += report.plot_curves(curves, out / f"intervention_{t}_en-{lang}.png",
                                              f"{t} mask, en-{lang}", header_lines=cfg.header("report", type=t))
    if "neuron_distribution" in metrics:
        detections = _load_detections(cfg, TYPES, langs)
        num_layers = open_capture_run(_runs(cfg) / "test.xfrn").manifest.num_layers if detections else 0
        for t in TYPES:
            counts = {}
            for (tt, lang), res in sorted(detections.items()):
                if tt == t:
                    hist: dict[int, int] = {}
                    for layer, _ in res.neurons:
                        hist[layer] = hist.get(layer, 0) + 1
                    counts[lang] = hist
            if counts:
                written += report.plot_layer_histogram(counts, num_layers, out / f"neuron_distribution_{t}.png",
                                                       f"{t} neurons per layer", cfg.header("report", type=t))
    if "qa_scatter" in metrics:
        for cond in ("type1", "baseline"):
            p = cfg.out / "evaluate" / f"qa_scatter_{cond}.csv"
            if not p.exists():
                continue
            rows = []
            for line in p.read_text().splitlines():
                if line.startswith("#") or line.startswith("question_id"):
                    continue
                qid, lang, x, y = line.split(",")
                rows.append((qid, lang, float(x), float(y)))
            written += report.plot_scatter(rows, out / f"qa_scatter_{cond}.png", f"QA F1 under {cond} mask",
                                           header_lines=cfg.header("report", condition=cond))
    written = [Path(p) for p in written]
    (out).mkdir(parents=True, exist_ok=True)
    index = out / "index.json"
    index.write_text(json.dumps(sorted(str(p.relative_to(out)) for p in written), indent=1) + "\n")
    return written


def cmd_init_fixture(out: Path, seed: int) -> list[Path]:
    """Write a self-contained planted-fixture experiment into ``out``."""
    fx = build_planted_fixture(seed)
    out.mkdir(parents=True, exist_ok=True)
    adapter = out / "adapter.json"
    adapter.write_text(json.dumps({"family": "fixture", "fixture": {"seed": seed}}, indent=1) + "\n")
    write_parallel_tsv(fixture_corpus(fx), out / "corpus.tsv")
    write_qa_jsonl(fixture_qa(fx, [l for l in fx.languages if l != "en"]), out / "qa.jsonl")
    config = {
        "model": "adapter.json", "corpus": "corpus.tsv", "qa": "qa.jsonl",
        "languages": list(fx.languages), "split_seed": seed, "seed": seed, "top_n": 32,
        "families": {"en": "latin", "ja": "cjk", "ko": "cjk"}, "out": "out",
    }
    (out / "config.json").write_text(json.dumps(config, indent=1) + "\n")
    return [adapter, out / "corpus.tsv", out / "qa.jsonl", out / "config.json"]


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xfrn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"xfrn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, typed=True, langs=True):
        sp.add_argument("--config", required=True, type=Path, help="experiment config JSON")
        sp.add_argument("--out", type=Path, help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="seed for the command's random generator")
        sp.add_argument("--top-n", type=int, dest="top_n", help="neurons kept per detection")
        if typed:
            sp.add_argument("--type", choices=TYPES, action="append", dest="types",
                            help="neuron type (repeatable; default both)")
        if langs:
            sp.add_argument("--lang", action="append", dest="langs",
                            help="language code (repeatable; default every non-English language)")

    common(sub.add_parser("extract", help="capture activations for the train and test splits"), False, False)
    common(sub.add_parser("detect", help="score and rank transfer neurons"))
    iv = sub.add_parser("intervene", help="re-measure the test split under detected and baseline masks")
    common(iv)
    iv.add_argument("--mask", type=Path, help="custom mask CSV (layer,index) instead of detected masks")
    common(sub.add_parser("stats", help="overlap, specificity and language-specific neuron statistics"))
    common(sub.add_parser("evaluate", help="zero-shot QA under no mask, Type-1 and baseline masks"), False)
    common(sub.add_parser("report", help="render figures with sibling CSVs"), False)
    fx = sub.add_parser("init-fixture", help="write a planted-fixture experiment directory")
    fx.add_argument("--out", type=Path, required=True)
    fx.add_argument("--seed", type=int, default=0)
    return p


def run(argv=None) -> list[Path]:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "init-fixture":
        return cmd_init_fixture(args.out, args.seed)
    overrides = {"seed": args.seed, "top_n": args.top_n}
    if args.out is not None:
        overrides["out"] = str(args.out.resolve())
    cfg = load_config(args.config, overrides)
    types = tuple(dict.fromkeys(getattr(args, "types", None) or TYPES))
    langs = list(dict.fromkeys(getattr(args, "langs", None) or cfg.l2_languages))
    unknown = [l for l in langs if l not in cfg.languages]
    if unknown:
        raise ConfigError(f"languages {unknown} are not in the config's language list")
    if args.command == "extract":
        return cmd_extract(cfg)
    if args.command == "detect":
        return cmd_detect(cfg, types, langs)
    if args.command == "intervene":
        return cmd_intervene(cfg, types, langs, args.mask)
    if args.command == "stats":
        return cmd_stats(cfg, types, langs)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, langs)
    return cmd_report(cfg, langs)


def main(argv=None) -> int:
    try:
        written = run(argv)
    except XfrnError as exc:
        print(f"xfrn: error: {exc}", file=sys.stderr)
        return exc.exit_code
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
