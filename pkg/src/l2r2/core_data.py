"""Data model and file formats: manifests, logit/label/metadata tables, alignment.

All tables are immutable once built. Floats are written with ``repr`` (the
shortest decimal that round-trips to the same binary64 value), so a
write -> read -> write cycle is byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ValidationError",
    "DatasetManifest",
    "LogitTable",
    "LabelTable",
    "MetadataTable",
    "AlignedSplit",
    "MeanStd",
    "load_manifest",
    "save_manifest",
    "load_logits",
    "save_logits",
    "load_labels",
    "save_labels",
    "load_metadata",
    "save_metadata",
    "align",
    "average_seed_runs",
    "format_float",
]


class ValidationError(ValueError):
    """Input violates a schema or invariant. The CLI maps it to exit code 2."""


def format_float(x: float) -> str:
    return repr(float(x))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _check_unique(ids: Sequence[str], what: str) -> None:
    if len(set(ids)) != len(ids):
        seen: set[str] = set()
        for i in ids:
            if i in seen:
                raise ValidationError(f"duplicate id {i!r} in {what}")
            seen.add(i)


@dataclass(frozen=True)
class LogitTable:
    sample_ids: tuple[str, ...]
    logits: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.sample_ids)
        z = np.asarray(self.logits, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] != len(ids):
            raise ValidationError(f"logits shape {z.shape} does not match {len(ids)} ids")
        if not np.all(np.isfinite(z)):
            row = int(np.argwhere(~np.isfinite(z))[0, 0])
            raise ValidationError(f"non-finite logit for id {ids[row]!r}")
        _check_unique(ids, "logit table")
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "logits", _frozen(z))

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass(frozen=True)
class LabelTable:
    sample_ids: tuple[str, ...]
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        ids = tuple(str(i) for i in self.sample_ids)
        y = np.asarray(self.labels, dtype=np.int64)
        if y.shape != (len(ids),):
            raise ValidationError(f"{y.shape[0] if y.ndim else 0} labels for {len(ids)} ids")
        _check_unique(ids, "label table")
        if len(y) and y.min() < 0:
            raise ValidationError(f"negative label {int(y.min())}")
        if self.num_classes is not None and len(y) and y.max() >= self.num_classes:
            raise ValidationError(f"label {int(y.max())} outside [0, {self.num_classes})")
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "labels", _frozen(y))

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass(frozen=True)
class MetadataTable:
    """Categorical side information; ``None`` marks a missing value."""

    sample_ids: tuple[str, ...]
    columns: Mapping[str, tuple[str | None, ...]]

    def __post_init__(self):
        ids = tuple(str(i) for i in self.sample_ids)
        _check_unique(ids, "metadata table")
        cols = {}
        for name, values in self.columns.items():
            values = tuple(values)
            if len(values) != len(ids):
                raise ValidationError(f"metadata column {name!r} has {len(values)} values for {len(ids)} ids")
            cols[name] = values
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "columns", cols)

    def select(self, ids: Sequence[str]) -> dict[str, tuple[str | None, ...]]:
        """Rows for ``ids`` in the given order; ids without a row are all-missing."""
        index = {i: n for n, i in enumerate(self.sample_ids)}
        out = {}
        for name, values in self.columns.items():
            out[name] = tuple(values[index[i]] if i in index else None for i in ids)
        return out


@dataclass(frozen=True)
class AlignedSplit:
    ids: tuple[str, ...]
    logits: Mapping[str, np.ndarray]
    labels: np.ndarray
    metadata: Mapping[str, tuple[str | None, ...]] | None = None

    def __post_init__(self):
        n = len(self.ids)
        if n == 0:
            raise ValidationError("aligned split is empty")
        for view, z in self.logits.items():
            if z.shape[0] != n:
                raise ValidationError(f"view {view!r} has {z.shape[0]} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.ids)

    def view_table(self, view: str) -> LogitTable:
        return LogitTable(self.ids, self.logits[view])

    def label_table(self) -> LabelTable:
        return LabelTable(self.ids, self.labels)


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float
    n_runs: int

    def __str__(self) -> str:
        return f"{self.mean:.4f} ± {self.std:.4f}"


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------


def _read_rows(path: str | Path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    return header, rows


def _writer(f):
    return csv.writer(f, lineterminator="\n")


def load_logits(path: str | Path, num_classes: int) -> LogitTable:
    """Read ``id,logit_0,...,logit_{C-1}``.

    A header row is expected; a first row whose id field is ``id`` is skipped,
    otherwise it is treated as data (files written by hand often omit it).
    """
    header, rows = _read_rows(path)
    if header and header[0] != "id":
        rows.insert(0, header)
    ids: list[str] = []
    z = np.empty((len(rows), num_classes), dtype=np.float64)
    for n, row in enumerate(rows):
        if len(row) != num_classes + 1:
            raise ValidationError(
                f"{path}: row {n + 1} ({row[0]!r}) has {len(row) - 1} logit columns, expected {num_classes}"
            )
        ids.append(row[0])
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError as e:
            raise ValidationError(f"{path}: row {row[0]!r}: {e}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"{path}: non-finite logit in row {row[0]!r}")
        z[n] = vals
    try:
        return LogitTable(tuple(ids), z.reshape(len(rows), num_classes))
    except ValidationError as e:
        raise ValidationError(f"{path}: {e}") from None


def save_logits(path: str | Path, table: LogitTable) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = _writer(f)
        w.writerow(["id"] + [f"logit_{k}" for k in range(table.num_classes)])
        for i, row in zip(table.sample_ids, table.logits):
            w.writerow([i] + [format_float(v) for v in row])


def load_labels(path: str | Path, num_classes: int | None = None) -> LabelTable:
    header, rows = _read_rows(path)
    if header[:2] != ["id", "label"]:
        raise ValidationError(f"{path}: expected header 'id,label', got {','.join(header)!r}")
    ids, labels = [], []
    for row in rows:
        if len(row) != 2:
            raise ValidationError(f"{path}: malformed row {row!r}")
        try:
            labels.append(int(row[1], 10))
        except ValueError:
            raise ValidationError(f"{path}: label {row[1]!r} for id {row[0]!r} is not an integer") from None
        ids.append(row[0])
    try:
        return LabelTable(tuple(ids), np.array(labels, dtype=np.int64), num_classes)
    except ValidationError as e:
        raise ValidationError(f"{path}: {e}") from None


def save_labels(path: str | Path, table: LabelTable) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = _writer(f)
        w.writerow(["id", "label"])
        for i, y in zip(table.sample_ids, table.labels):
            w.writerow([i, int(y)])


def load_metadata(path: str | Path, columns: Sequence[str] | None = None) -> MetadataTable:
    header, rows = _read_rows(path)
    if not header or header[0] != "id":
        raise ValidationError(f"{path}: metadata header must start with 'id'")
    names = header[1:]
    if columns is not None:
        missing = [c for c in columns if c not in names]
        if missing:
            raise ValidationError(f"{path}: metadata column(s) {missing} not present (have {names})")
    ids = []
    cols: dict[str, list[str | None]] = {c: [] for c in names}
    for row in rows:
        if len(row) != len(header):
            raise ValidationError(f"{path}: row {row[0]!r} has {len(row)} fields, expected {len(header)}")
        ids.append(row[0])
        for c, v in zip(names, row[1:]):
            cols[c].append(v if v != "" else None)
    keep = names if columns is None else list(columns)
    return MetadataTable(tuple(ids), {c: tuple(cols[c]) for c in keep})


def save_metadata(path: str | Path, table: MetadataTable) -> None:
    names = list(table.columns)
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = _writer(f)
        w.writerow(["id"] + names)
        for n, i in enumerate(table.sample_ids):
            w.writerow([i] + ["" if table.columns[c][n] is None else table.columns[c][n] for c in names])


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    num_classes: int
    class_names: tuple[str, ...]
    seeds: tuple[str, ...]
    views: Mapping[str, Mapping[str, Mapping[str, Path]]]
    splits: Mapping[str, Path]
    metadata_path: Path | None = None
    metadata_columns: tuple[str, ...] = ()
    imbalanced: bool = False
    root: Path = field(default=Path("."), compare=False)

    def logit_path(self, view: str, split: str, seed) -> Path:
        if view not in self.views:
            raise ValidationError(f"unknown view {view!r}; valid views: {', '.join(sorted(self.views))}")
        if split not in self.splits:
            raise ValidationError(f"unknown split {split!r}; valid splits: {', '.join(sorted(self.splits))}")
        seed = str(seed)
        if seed not in self.seeds:
            raise ValidationError(f"unknown seed {seed!r}; valid seeds: {', '.join(self.seeds)}")
        return self.views[view][split][seed]

    def load_labels(self, split: str) -> LabelTable:
        if split not in self.splits:
            raise ValidationError(f"unknown split {split!r}; valid splits: {', '.join(sorted(self.splits))}")
        return load_labels(self.splits[split], self.num_classes)

    def load_metadata(self) -> MetadataTable | None:
        if self.metadata_path is None:
            return None
        return load_metadata(self.metadata_path, self.metadata_columns)

    def load_split(self, split: str, views: Sequence[str], seed, with_metadata: bool = False) -> AlignedSplit:
        """Load and align ``views`` for one split and seed.

        The same seed index is used for every view (seed i of FG with seed i of FULL).
        """
        paths = [self.logit_path(v, split, seed) for v in views]
        labels = self.load_labels(split)
        with ThreadPoolExecutor(max_workers=max(1, min(4, len(paths)))) as pool:
            tables = list(pool.map(lambda p: load_logits(p, self.num_classes), paths))
        meta = self.load_metadata() if with_metadata else None
        return align(dict(zip(views, tables)), labels, meta)


def _manifest_error(msg: str) -> ValidationError:
    return ValidationError(f"manifest: {msg}")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest JSON file. Relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise _manifest_error(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise _manifest_error("top level must be an object")
    for key in ("name", "num_classes", "class_names", "seeds", "views", "splits"):
        if key not in raw:
            raise _manifest_error(f"missing key {key!r}")
    C = raw["num_classes"]
    if not isinstance(C, int) or isinstance(C, bool) or C < 2:
        raise _manifest_error(f"num_classes must be an integer >= 2, got {C!r}")
    names = raw["class_names"]
    if not isinstance(names, list) or len(names) != C:
        got = len(names) if isinstance(names, list) else type(names).__name__
        raise _manifest_error(f"class_names: expected {C} names, got {got}")
    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise _manifest_error("seeds must be a non-empty list")
    seeds = tuple(str(s) for s in seeds)
    if len(set(seeds)) != len(seeds):
        raise _manifest_error("seeds must be unique")

    root = path.parent
    splits_raw = raw["splits"]
    if not isinstance(splits_raw, dict) or not splits_raw:
        raise _manifest_error("splits must be a non-empty object")
    splits = {str(s): root / p for s, p in splits_raw.items()}

    views_raw = raw["views"]
    if not isinstance(views_raw, dict) or "full" not in views_raw:
        raise _manifest_error("views must be an object declaring at least 'full'")
    views: dict[str, dict[str, dict[str, Path]]] = {}
    for view, per_split in views_raw.items():
        if not isinstance(per_split, dict):
            raise _manifest_error(f"views/{view} must map split -> seed -> path")
        views[view] = {}
        for split in splits:
            per_seed = per_split.get(split)
            if not isinstance(per_seed, dict):
                raise _manifest_error(f"incomplete view matrix: missing {view}/{split}/seed{seeds[0]}")
            views[view][split] = {}
            for s in seeds:
                if s not in per_seed:
                    raise _manifest_error(f"incomplete view matrix: missing {view}/{split}/seed{s}")
                views[view][split][s] = root / per_seed[s]
        extra = set(per_split) - set(splits)
        if extra:
            raise _manifest_error(f"views/{view} references undeclared split(s) {sorted(extra)}")

    meta_path, meta_cols = None, ()
    meta = raw.get("metadata")
    if meta is not None:
        if not isinstance(meta, dict) or "path" not in meta:
            raise _manifest_error("metadata must be an object with 'path' and 'columns'")
        meta_path = root / meta["path"]
        meta_cols = tuple(meta.get("columns", ()))

    manifest = DatasetManifest(
        name=str(raw["name"]),
        num_classes=C,
        class_names=tuple(str(n) for n in names),
        seeds=seeds,
        views=views,
        splits=splits,
        metadata_path=meta_path,
        metadata_columns=meta_cols,
        imbalanced=bool(raw.get("imbalanced", False)),
        root=root,
    )
    if check_files:
        for split, p in splits.items():
            if not p.is_file():
                raise _manifest_error(f"labels file for split {split!r} not found: {p}")
        for view, per_split in views.items():
            for split, per_seed in per_split.items():
                for s, p in per_seed.items():
                    if not p.is_file():
                        raise _manifest_error(f"file for {view}/{split}/seed{s} not found: {p}")
        if meta_path is not None and not meta_path.is_file():
            raise _manifest_error(f"metadata file not found: {meta_path}")
    return manifest


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    root = Path(path).parent

    def rel(p: Path) -> str:
        try:
            return Path(p).relative_to(root).as_posix()
        except ValueError:
            return str(p)

    raw = {
        "name": manifest.name,
        "num_classes": manifest.num_classes,
        "class_names": list(manifest.class_names),
        "seeds": list(manifest.seeds),
        "views": {
            v: {s: {seed: rel(p) for seed, p in per_seed.items()} for s, per_seed in per_split.items()}
            for v, per_split in manifest.views.items()
        },
        "splits": {s: rel(p) for s, p in manifest.splits.items()},
        "metadata": None
        if manifest.metadata_path is None
        else {"path": rel(manifest.metadata_path), "columns": list(manifest.metadata_columns)},
        "imbalanced": manifest.imbalanced,
    }
    Path(path).write_text(json.dumps(raw, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Alignment and seed aggregation
# ---------------------------------------------------------------------------


def align(
    views: Mapping[str, LogitTable],
    labels: LabelTable,
    metadata: MetadataTable | None = None,
) -> AlignedSplit:
    """Re-index every view to the label table's row order."""
    ids = labels.sample_ids
    out = {}
    for name, table in views.items():
        index = {i: n for n, i in enumerate(table.sample_ids)}
        rows = np.empty(len(ids), dtype=np.int64)
        for n, i in enumerate(ids):
            try:
                rows[n] = index[i]
            except KeyError:
                raise ValidationError(f"id {i!r} from labels is missing in view {name!r}") from None
        out[name] = _frozen(table.logits[rows])
    meta = metadata.select(ids) if metadata is not None else None
    return AlignedSplit(ids, out, labels.labels, meta)


def average_seed_runs(values: Sequence[float]) -> MeanStd:
    """Mean and population standard deviation over seeded runs."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("average_seed_runs: no values")
    return MeanStd(float(v.mean()), float(v.std(ddof=0)), int(v.size))
