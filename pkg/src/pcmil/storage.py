"""On-disk formats: the per-slide embedding store, JSON-lines manifests, and
flat ``key = value`` config files.

Embedding store layout (little-endian): magic ``PCM1``, u32 embedding width D,
u32 record count N, then N records of (u32 row, u32 col, D float32 values).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .bagging import ANNOTATION_KINDS, Bag, PatchAnnotation
from .errors import ConfigError, DataFormatError
from .geometry import Context, SlideGrid, full_tissue, parse_context

EMBEDDING_MAGIC = b"PCM1"
SPLITS = ("train", "val", "test")


@dataclass
class EmbeddingStore:
    """Per-slide patch embeddings keyed by (row, col)."""

    dim: int
    vectors: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def add(self, row: int, col: int, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise ValueError(f"expected a {self.dim}-vector, got shape {vec.shape}")
        self.vectors[(row, col)] = vec

    def get(self, row: int, col: int) -> np.ndarray:
        return self.vectors[(row, col)]

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)


def write_embedding_store(path: str | Path, store: EmbeddingStore) -> None:
    keys = sorted(store.vectors)
    rec = np.dtype([("row", "<u4"), ("col", "<u4"), ("vec", "<f4", (store.dim,))])
    records = np.empty(len(keys), dtype=rec)
    for i, (row, col) in enumerate(keys):
        records[i] = (row, col, store.vectors[(row, col)])
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", store.dim, len(keys)))
        fh.write(records.tobytes())


def read_embedding_store(path: str | Path) -> EmbeddingStore:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != EMBEDDING_MAGIC:
        raise DataFormatError(f"{path}: not an embedding store (bad magic)")
    dim, count = struct.unpack_from("<II", raw, 4)
    rec = np.dtype([("row", "<u4"), ("col", "<u4"), ("vec", "<f4", (dim,))])
    expected = 12 + count * rec.itemsize
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: size {len(raw)} does not match {count} records of width {dim}"
        )
    records = np.frombuffer(raw, dtype=rec, offset=12)
    store = EmbeddingStore(dim=dim)
    for entry in records:
        store.vectors[(int(entry["row"]), int(entry["col"]))] = np.array(
            entry["vec"], dtype=np.float32
        )
    return store


def _read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            if not isinstance(record, dict):
                raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
            yield record


def _write_jsonl(path: str | Path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    n_rows: int
    n_cols: int
    label: int
    split: str = "train"
    all_tissue: bool = True


def write_slide_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    _write_jsonl(
        path,
        (
            {
                "id": e.slide_id,
                "rows": e.n_rows,
                "cols": e.n_cols,
                "label": e.label,
                "split": e.split,
                "all_tissue": e.all_tissue,
            }
            for e in entries
        ),
    )


def read_slide_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    for record in _read_jsonl(path):
        try:
            entry = ManifestEntry(
                slide_id=str(record["id"]),
                n_rows=int(record["rows"]),
                n_cols=int(record["cols"]),
                label=int(record["label"]),
                split=str(record.get("split", "train")),
                all_tissue=bool(record.get("all_tissue", True)),
            )
        except KeyError as exc:
            raise DataFormatError(f"{path}: manifest record missing {exc}") from None
        if entry.label not in (0, 1):
            raise DataFormatError(f"{path}: label must be 0 or 1 for {entry.slide_id}")
        if entry.split not in SPLITS:
            raise DataFormatError(f"{path}: unknown split {entry.split!r}")
        entries.append(entry)
    return entries


def write_tissue_list(
    path: str | Path, patches: Iterable[tuple[str, int, int]]
) -> None:
    _write_jsonl(path, ({"id": s, "row": r, "col": c} for s, r, c in patches))


def read_tissue_list(path: str | Path) -> dict[str, set[tuple[int, int]]]:
    tissue: dict[str, set[tuple[int, int]]] = {}
    for record in _read_jsonl(path):
        try:
            tissue.setdefault(str(record["id"]), set()).add(
                (int(record["row"]), int(record["col"]))
            )
        except KeyError as exc:
            raise DataFormatError(f"{path}: tissue record missing {exc}") from None
    return tissue


def grids_from_manifest(
    entries: Iterable[ManifestEntry],
    tissue: Mapping[str, set[tuple[int, int]]] | None = None,
) -> dict[str, SlideGrid]:
    grids = {}
    for entry in entries:
        if entry.all_tissue:
            patches = full_tissue(entry.n_rows, entry.n_cols)
        else:
            if tissue is None or entry.slide_id not in tissue:
                raise DataFormatError(
                    f"no tissue list for slide {entry.slide_id} (all_tissue is false)"
                )
            patches = frozenset(tissue[entry.slide_id])
        grids[entry.slide_id] = SlideGrid(
            slide_id=entry.slide_id,
            n_rows=entry.n_rows,
            n_cols=entry.n_cols,
            tissue=patches,
            slide_label=entry.label,
        )
    return grids


def write_annotations(path: str | Path, annotations: Iterable[PatchAnnotation]) -> None:
    _write_jsonl(
        path,
        (
            {"id": a.slide_id, "row": a.row, "col": a.col, "kind": a.kind}
            for a in annotations
        ),
    )


def read_annotations(path: str | Path) -> dict[str, list[PatchAnnotation]]:
    by_slide: dict[str, list[PatchAnnotation]] = {}
    for record in _read_jsonl(path):
        try:
            kind = str(record["kind"])
            if kind not in ANNOTATION_KINDS:
                raise DataFormatError(f"{path}: unknown annotation kind {kind!r}")
            ann = PatchAnnotation(
                slide_id=str(record["id"]),
                row=int(record["row"]),
                col=int(record["col"]),
                kind=kind,
            )
        except KeyError as exc:
            raise DataFormatError(f"{path}: annotation record missing {exc}") from None
        by_slide.setdefault(ann.slide_id, []).append(ann)
    return by_slide


def write_assignment(path: str | Path, assignment: Mapping[str, Context]) -> None:
    _write_jsonl(
        path,
        (
            {"id": slide_id, "context": context.token}
            for slide_id, context in sorted(assignment.items())
        ),
    )


def read_assignment(path: str | Path) -> dict[str, Context]:
    assignment = {}
    for record in _read_jsonl(path):
        try:
            assignment[str(record["id"])] = parse_context(str(record["context"]))
        except KeyError as exc:
            raise DataFormatError(f"{path}: assignment record missing {exc}") from None
        except ValueError as exc:
            raise DataFormatError(f"{path}: {exc}") from None
    return assignment


def write_bag_manifest(path: str | Path, bags: Iterable[Bag]) -> None:
    _write_jsonl(
        path,
        (
            {
                "id": bag.slide_id,
                "context": bag.context.token,
                "region": list(bag.region) if bag.region is not None else None,
                "label": bag.label,
                "n_members": bag.n_members,
                "split": bag.split,
            }
            for bag in bags
        ),
    )


def read_bag_manifest(path: str | Path) -> list[dict]:
    records = []
    for record in _read_jsonl(path):
        try:
            records.append(
                {
                    "id": str(record["id"]),
                    "context": parse_context(str(record["context"])),
                    "region": tuple(record["region"]) if record["region"] else None,
                    "label": int(record["label"]),
                    "n_members": int(record["n_members"]),
                    "split": str(record["split"]),
                }
            )
        except KeyError as exc:
            raise DataFormatError(f"{path}: bag record missing {exc}") from None
    return records


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` config file; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = stripped.split("=", 1)
            values[key.strip()] = value.strip()
    return values
