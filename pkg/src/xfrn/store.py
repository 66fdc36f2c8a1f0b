"""On-disk and in-memory data model for captured activations.

A capture run is one self-describing file::

    b"XFRN1\\n" | UTF-8 JSON header | 0x00 | f32 little-endian payload

The header carries the model manifest and an index mapping every
``(sample_id, layer, kind)`` block to a byte offset and length inside the
payload. Value vectors (rows of each layer's down projection) live in a
companion file with the same framing and ``kind="values"``.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from xfrn.errors import DataError

MAGIC = b"XFRN1\n"
CAPTURE_KINDS = ("hidden_state", "pre_mlp", "attention_out", "mlp_activation")
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class ModelManifest:
    model_id: str
    num_layers: int
    hidden_dim: int
    mlp_dim: int
    dtype: str = "f32"
    capture_kinds: tuple[str, ...] = CAPTURE_KINDS
    # Whether the last layer's hidden_state includes the final normalization.
    final_norm_applied: bool = False

    def __post_init__(self):
        if self.num_layers < 2:
            raise DataError(f"num_layers must be >= 2, got {self.num_layers}")
        if self.hidden_dim < 1 or self.mlp_dim < 1:
            raise DataError("hidden_dim and mlp_dim must be positive")
        if self.dtype != "f32":
            raise DataError(f"unsupported dtype {self.dtype!r}")
        unknown = set(self.capture_kinds) - set(CAPTURE_KINDS)
        if unknown:
            raise DataError(f"unknown capture kinds: {sorted(unknown)}")
        object.__setattr__(self, "capture_kinds", tuple(k for k in CAPTURE_KINDS if k in self.capture_kinds))

    def dim(self, kind: str) -> int:
        return self.mlp_dim if kind == "mlp_activation" else self.hidden_dim

    @property
    def population(self) -> int:
        return self.num_layers * self.mlp_dim

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "mlp_dim": self.mlp_dim,
            "dtype": self.dtype,
            "capture_kinds": list(self.capture_kinds),
            "final_norm_applied": self.final_norm_applied,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelManifest":
        return cls(
            model_id=d["model_id"],
            num_layers=int(d["num_layers"]),
            hidden_dim=int(d["hidden_dim"]),
            mlp_dim=int(d["mlp_dim"]),
            dtype=d.get("dtype", "f32"),
            capture_kinds=tuple(d.get("capture_kinds", CAPTURE_KINDS)),
            final_norm_applied=bool(d.get("final_norm_applied", False)),
        )


@dataclass
class ActivationRecord:
    """Final-token captures of one sample at one layer (layers are 1-based)."""

    sample_id: str
    language: str
    layer: int
    hidden_state: np.ndarray | None = None
    pre_mlp: np.ndarray | None = None
    attention_out: np.ndarray | None = None
    mlp_activation: np.ndarray | None = None
    pair_index: int | None = None

    def get(self, kind: str) -> np.ndarray | None:
        return getattr(self, kind)

    def kinds(self) -> list[str]:
        return [k for k in CAPTURE_KINDS if getattr(self, k) is not None]


def _check_record(manifest: ModelManifest, rec: ActivationRecord) -> None:
    if not 1 <= rec.layer <= manifest.num_layers:
        raise DataError(f"sample {rec.sample_id!r}: layer {rec.layer} outside [1, {manifest.num_layers}]")
    for kind in rec.kinds():
        if kind not in manifest.capture_kinds:
            raise DataError(f"sample {rec.sample_id!r}: kind {kind!r} not declared in manifest")
        vec = np.asarray(rec.get(kind))
        if vec.ndim != 1 or vec.shape[0] != manifest.dim(kind):
            raise DataError(
                f"sample {rec.sample_id!r}: {kind} has shape {vec.shape}, expected ({manifest.dim(kind)},)"
            )


def _write_framed(path: Path, header: dict, blocks: Iterable[bytes]) -> None:
    # Assemble in a temp file next to the target and rename, so an
    # interrupted write never leaves a file that parses.
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if b"\x00" in header_bytes:
        raise DataError("header contains a NUL byte")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".xfrn-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(header_bytes)
            fh.write(b"\x00")
            for blob in blocks:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header(path: Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path}: not an XFRN1 file")
        chunks = []
        while True:
            chunk = fh.read(65536)
            if not chunk:
                raise DataError(f"{path}: header is not NUL-terminated")
            cut = chunk.find(b"\x00")
            if cut >= 0:
                chunks.append(chunk[:cut])
                break
            chunks.append(chunk)
    raw = b"".join(chunks)
    return json.loads(raw.decode("utf-8")), len(MAGIC) + len(raw) + 1


@dataclass
class CaptureRun:
    """Read-only view of a capture-run file."""

    path: Path
    manifest: ModelManifest
    meta: dict
    index: list[dict]
    payload_offset: int
    _payload: np.ndarray = field(repr=False, default=None)
    _by_key: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        size = os.path.getsize(self.path) - self.payload_offset
        self._payload = (
            np.memmap(self.path, dtype=_F32, mode="r", offset=self.payload_offset)
            if size > 0
            else np.zeros(0, dtype=_F32)
        )
        for pos, entry in enumerate(self.index):
            self._by_key[(entry["sample_id"], entry["layer"])] = pos

    def _block(self, entry: dict, kind: str) -> np.ndarray:
        off, length = entry["blocks"][kind]
        return np.array(self._payload[off // 4 : (off + length) // 4])

    @property
    def languages(self) -> list[str]:
        return sorted({e["language"] for e in self.index})

    def sample_ids(self, language: str | None = None) -> list[str]:
        ids = {e["sample_id"] for e in self.index if language is None or e["language"] == language}
        return sorted(ids)

    def pair_indices(self, language: str) -> dict[int, str]:
        """Map pair_index -> sample_id for one language."""
        return {
            e["pair_index"]: e["sample_id"]
            for e in self.index
            if e["language"] == language and e["layer"] == 1 and e.get("pair_index") is not None
        }

    def read_record(self, sample_id: str, layer: int) -> ActivationRecord:
        try:
            entry = self.index[self._by_key[(sample_id, layer)]]
        except KeyError:
            raise DataError(f"no record for sample {sample_id!r} at layer {layer}") from None
        rec = ActivationRecord(
            sample_id=entry["sample_id"],
            language=entry["language"],
            layer=entry["layer"],
            pair_index=entry.get("pair_index"),
        )
        for kind in entry["blocks"]:
            setattr(rec, kind, self._block(entry, kind))
        return rec

    def records(self) -> Iterator[ActivationRecord]:
        for entry in self.index:
            yield self.read_record(entry["sample_id"], entry["layer"])


def write_capture_run(
    manifest: ModelManifest,
    records: Iterable[ActivationRecord],
    path: str | os.PathLike,
    meta: dict | None = None,
) -> CaptureRun:
    """Validate and write ``records``; return a handle on the written file."""
    index = []
    blobs = []
    offset = 0
    seen = set()
    for rec in records:
        _check_record(manifest, rec)
        key = (rec.sample_id, rec.layer)
        if key in seen:
            raise DataError(f"duplicate record for sample {rec.sample_id!r} at layer {rec.layer}")
        seen.add(key)
        entry = {"sample_id": rec.sample_id, "language": rec.language, "layer": int(rec.layer), "blocks": {}}
        if rec.pair_index is not None:
            entry["pair_index"] = int(rec.pair_index)
        for kind in rec.kinds():
            blob = np.ascontiguousarray(rec.get(kind), dtype=_F32).tobytes()
            entry["blocks"][kind] = [offset, len(blob)]
            blobs.append(blob)
            offset += len(blob)
        index.append(entry)
    header = {"format": "XFRN1", "kind": "capture", "manifest": manifest.to_dict(), "meta": meta or {}, "records": index}
    _write_framed(Path(path), header, blobs)
    return open_capture_run(path)


def open_capture_run(path: str | os.PathLike) -> CaptureRun:
    path = Path(path)
    if not path.exists():
        raise DataError(f"capture run not found: {path}")
    header, payload_offset = _read_header(path)
    if header.get("kind") != "capture":
        raise DataError(f"{path}: expected kind 'capture', got {header.get('kind')!r}")
    return CaptureRun(
        path=path,
        manifest=ModelManifest.from_dict(header["manifest"]),
        meta=header.get("meta", {}),
        index=header["records"],
        payload_offset=payload_offset,
    )


def read_header(path: str | os.PathLike) -> dict:
    return _read_header(Path(path))[0]


def load_slice(run: CaptureRun, layer: int, kind: str, language: str | None = None) -> np.ndarray:
    """Stack one capture kind at one layer into an ``n x dim`` matrix.

    Rows are ordered by ascending sample_id.
    """
    m = run.manifest
    if kind not in CAPTURE_KINDS:
        raise DataError(f"unknown capture kind {kind!r}; expected one of {CAPTURE_KINDS}")
    if kind not in m.capture_kinds:
        raise DataError(f"kind {kind!r} was not captured in this run (captured: {list(m.capture_kinds)})")
    if not 1 <= layer <= m.num_layers:
        raise DataError(f"layer {layer} outside [1, {m.num_layers}]")
    entries = [
        e for e in run.index if e["layer"] == layer and (language is None or e["language"] == language)
    ]
    entries.sort(key=lambda e: e["sample_id"])
    out = np.empty((len(entries), m.dim(kind)), dtype=_F32)
    for row, entry in enumerate(entries):
        if kind not in entry["blocks"]:
            raise DataError(f"sample {entry['sample_id']!r} has no {kind} block at layer {layer}")
        out[row] = run._block(entry, kind)
    return out


def load_aligned(run: CaptureRun, layer: int, kind: str, lang_a: str, lang_b: str,
                 pair_indices: Iterable[int] | None = None) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Rows for two languages aligned by shared pair_index (ascending)."""
    ids_a = run.pair_indices(lang_a)
    ids_b = run.pair_indices(lang_b)
    common = sorted(set(ids_a) & set(ids_b))
    if pair_indices is not None:
        wanted = set(pair_indices)
        common = [p for p in common if p in wanted]
    if not common:
        raise DataError(f"no parallel pairs between {lang_a!r} and {lang_b!r}")
    out = []
    for lang, ids in ((lang_a, ids_a), (lang_b, ids_b)):
        rows = load_slice(run, layer, kind, lang)
        pos = {sid: i for i, sid in enumerate(run.sample_ids(lang))}
        out.append(rows[[pos[ids[p]] for p in common]])
    return out[0], out[1], common


def rows_for_pairs(run: CaptureRun, layer: int, kind: str, language: str, pair_indices) -> np.ndarray:
    """Rows of one language in the order of ``pair_indices``."""
    ids = run.pair_indices(language)
    rows = load_slice(run, layer, kind, language)
    pos = {sid: i for i, sid in enumerate(run.sample_ids(language))}
    try:
        return rows[[pos[ids[p]] for p in pair_indices]]
    except KeyError as exc:
        raise DataError(f"pair {exc} not captured for {language!r}") from None


@dataclass
class ValueVectorTable:
    """Per-layer down-projection rows, ``values[l]`` has shape ``(d_m, d)``."""

    model_id: str
    values: dict[int, np.ndarray]

    def layer(self, layer: int) -> np.ndarray:
        try:
            return self.values[layer]
        except KeyError:
            raise DataError(f"value table has no layer {layer}") from None

    @property
    def num_layers(self) -> int:
        return len(self.values)


def write_values(table: ValueVectorTable, path: str | os.PathLike, meta: dict | None = None) -> None:
    records = []
    blobs = []
    offset = 0
    shapes = {tuple(v.shape) for v in table.values.values()}
    if len(shapes) != 1:
        raise DataError(f"value rows must have one shape across layers, got {sorted(shapes)}")
    for layer in sorted(table.values):
        blob = np.ascontiguousarray(table.values[layer], dtype=_F32).tobytes()
        records.append({"layer": layer, "shape": list(table.values[layer].shape), "blocks": {"values": [offset, len(blob)]}})
        blobs.append(blob)
        offset += len(blob)
    header = {"format": "XFRN1", "kind": "values", "model_id": table.model_id, "meta": meta or {}, "records": records}
    _write_framed(Path(path), header, blobs)


def read_values(path: str | os.PathLike) -> ValueVectorTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"value-vector file not found: {path}")
    header, payload_offset = _read_header(path)
    if header.get("kind") != "values":
        raise DataError(f"{path}: expected kind 'values', got {header.get('kind')!r}")
    raw = np.fromfile(path, dtype=_F32, offset=payload_offset)
    values = {}
    for rec in header["records"]:
        off, length = rec["blocks"]["values"]
        values[int(rec["layer"])] = raw[off // 4 : (off + length) // 4].reshape(rec["shape"]).copy()
    return ValueVectorTable(model_id=header["model_id"], values=values)


# -- neuron sets ---------------------------------------------------------

NeuronId = tuple[int, int]
MASK_PROVENANCE = ("detected_type1", "detected_type2", "baseline_random", "custom")


@dataclass(frozen=True)
class DeactivationMask:
    """Neurons whose activations are forced to zero: ``(layer, index)`` pairs."""

    entries: frozenset[NeuronId] = frozenset()
    provenance: str = "custom"
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", frozenset((int(l), int(i)) for l, i in self.entries))
        if self.provenance not in MASK_PROVENANCE:
            raise DataError(f"unknown mask provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def validate(self, num_layers: int, mlp_dim: int) -> None:
        from xfrn.errors import ModelError

        for layer, idx in self.entries:
            if not 1 <= layer <= num_layers:
                raise ModelError(f"mask layer {layer} outside [1, {num_layers}]")
            if not 0 <= idx < mlp_dim:
                raise ModelError(f"mask neuron index {idx} outside [0, {mlp_dim}) at layer {layer}")

    def by_layer(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for layer, idx in sorted(self.entries):
            out.setdefault(layer, []).append(idx)
        return out

    def histogram(self) -> dict[int, int]:
        return {layer: len(idx) for layer, idx in self.by_layer().items()}

    def sorted_entries(self) -> list[NeuronId]:
        return sorted(self.entries)


def write_mask_csv(mask: DeactivationMask, path: str | os.PathLike, header_lines: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        fh.write(f"# provenance: {mask.provenance}\n")
        if mask.seed is not None:
            fh.write(f"# seed: {mask.seed}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "index"])
        writer.writerows(mask.sorted_entries())


def read_mask_csv(path: str | os.PathLike, provenance: str | None = None) -> DeactivationMask:
    path = Path(path)
    if not path.exists():
        raise DataError(f"mask file not found: {path}")
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            else:
                lines.append(line)
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or not {"layer", "index"} <= set(reader.fieldnames):
        raise DataError(f"{path}: mask CSV needs 'layer' and 'index' columns")
    for row in reader:
        try:
            rows.append((int(row["layer"]), int(row["index"])))
        except ValueError:
            raise DataError(f"{path}: non-integer mask entry {row}") from None
    seed = meta.get("seed")
    return DeactivationMask(
        frozenset(rows),
        provenance=provenance or meta.get("provenance", "custom"),
        seed=int(seed) if seed not in (None, "", "None") else None,
    )
