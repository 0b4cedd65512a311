"""Raw interaction tables to encoded datasets.

Builds per-field vocabularies (index 0 reserved for out-of-vocabulary),
binarizes labels with a strict greater-than threshold, bucketizes numeric
attribute columns into quantile bins so the model only ever sees
categorical fields, and writes seeded train/valid/test splits.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

OOV_INDEX = 0


@dataclass(frozen=True)
class FieldSchema:
    field_name: str
    field_index: int
    cardinality: int  # distinct values + the reserved OOV slot

    def __post_init__(self):
        if self.cardinality < 2:
            raise DataError(
                f"field '{self.field_name}' has cardinality {self.cardinality}; "
                "need the OOV slot plus at least one value"
            )


@dataclass
class EncodedDataset:
    """Encoded examples: one row of field indices plus a binary label each."""

    indices: np.ndarray  # (N, f) int64
    labels: np.ndarray  # (N,) int64 in {0,1}

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass
class DatasetSplit:
    train: EncodedDataset
    valid: EncodedDataset
    test: EncodedDataset
    split_seed: int


class Vocabulary:
    """Per-field value-to-index maps; encoding of unseen values never errors."""

    def __init__(self, schemas: list[FieldSchema], maps: list[dict[str, int]]):
        self.schemas = schemas
        self.maps = maps
        self._inverse = [
            {idx: val for val, idx in m.items()} for m in maps
        ]

    @property
    def num_fields(self) -> int:
        return len(self.schemas)

    def encode_value(self, field: int, value: str) -> int:
        return self.maps[field].get(value, OOV_INDEX)

    def decode_value(self, field: int, index: int) -> str | None:
        """Inverse of encode for in-vocabulary indices; OOV decodes to None."""
        return self._inverse[field].get(index)

    def encode_row(self, row: list[str]) -> np.ndarray:
        if len(row) != self.num_fields:
            raise DataError(f"row has {len(row)} fields, schema expects {self.num_fields}")
        return np.array(
            [self.maps[i].get(v, OOV_INDEX) for i, v in enumerate(row)], dtype=np.int64
        )

    def save(self, path) -> None:
        """One line per entry: field_name TAB raw_value TAB index."""
        with open(path, "w", encoding="utf-8") as f:
            for schema, mapping in zip(self.schemas, self.maps):
                for value, idx in mapping.items():
                    f.write(f"{schema.field_name}\t{value}\t{idx}\n")

    @classmethod
    def load(cls, path, field_names: list[str]) -> "Vocabulary":
        maps: dict[str, dict[str, int]] = {name: {} for name in field_names}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: malformed vocabulary line")
                name, value, idx = parts
                if name not in maps:
                    raise DataError(f"{path}:{lineno}: unknown field '{name}'")
                maps[name][value] = int(idx)
        schemas = [
            FieldSchema(name, i, len(maps[name]) + 1) for i, name in enumerate(field_names)
        ]
        return cls(schemas, [maps[name] for name in field_names])


def build_vocabulary(rows: list[list[str]], field_names: list[str]) -> Vocabulary:
    """Assign indices >= 1 in first-appearance order; index 0 stays OOV.

    Deterministic given row order.
    """
    if not rows:
        raise DataError("empty dataset")
    f = len(field_names)
    maps: list[dict[str, int]] = [dict() for _ in range(f)]
    for rowno, row in enumerate(rows, 1):
        if len(row) != f:
            raise DataError(f"ragged row {rowno}: {len(row)} columns, expected {f}")
        for i, value in enumerate(row):
            if value not in maps[i]:
                maps[i][value] = len(maps[i]) + 1
    schemas = [FieldSchema(name, i, len(maps[i]) + 1) for i, name in enumerate(field_names)]
    return Vocabulary(schemas, maps)


def binarize_label(raw_score: float, threshold: float) -> int:
    """1 iff raw_score > threshold (strict), else 0."""
    if not math.isfinite(raw_score):
        raise DataError(f"non-finite label score {raw_score!r}")
    return 1 if raw_score > threshold else 0


def bucketize_numeric(values: list[str], num_bins: int) -> list[str]:
    """Map a numeric column to quantile-bin labels, usable as categories.

    Unparsable entries get their own 'nan' token.
    """
    if num_bins < 2:
        raise DataError(f"need at least 2 bins, got {num_bins}")
    parsed = np.full(len(values), np.nan)
    for i, v in enumerate(values):
        try:
            parsed[i] = float(v)
        except ValueError:
            pass
    finite = parsed[np.isfinite(parsed)]
    if finite.size == 0:
        return ["nan"] * len(values)
    edges = np.unique(np.quantile(finite, np.linspace(0, 1, num_bins + 1)[1:-1]))
    out = []
    for x in parsed:
        if not np.isfinite(x):
            out.append("nan")
        else:
            out.append(f"b{int(np.searchsorted(edges, x, side='right'))}")
    return out


def split_dataset(
    dataset: EncodedDataset, ratios: tuple[float, float, float], seed: int
) -> DatasetSplit:
    """Seeded-shuffle partition into train/valid/test; same seed, same split."""
    r_train, r_valid, r_test = ratios
    if min(ratios) <= 0:
        raise DataError(f"split ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    n = len(dataset)
    if n < 3:
        raise DataError(f"need at least 3 examples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * r_train))
    n_valid = int(math.floor(n * r_valid))
    sections = (
        perm[:n_train],
        perm[n_train : n_train + n_valid],
        perm[n_train + n_valid :],
    )
    parts = [
        EncodedDataset(dataset.indices[sel], dataset.labels[sel]) for sel in sections
    ]
    return DatasetSplit(train=parts[0], valid=parts[1], test=parts[2], split_seed=seed)


def read_table(path, delimiter: str = ",") -> tuple[list[str], list[list[str]]]:
    """Delimiter-separated text with a header row."""
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    if not rows:
        raise DataError("empty dataset")
    return header, rows


def encode_table(
    rows: list[list[str]],
    header: list[str],
    label_column: str,
    field_columns: list[str],
    threshold: float,
    numeric_fields: list[str] | None = None,
    numeric_bins: int = 10,
) -> tuple[Vocabulary, EncodedDataset]:
    """Vocabulary build plus full encode of one raw table."""
    missing = [c for c in [label_column, *field_columns] if c not in header]
    if missing:
        raise DataError(f"missing columns: {', '.join(missing)}")
    col_of = {name: header.index(name) for name in header}
    width = len(header)
    for rowno, row in enumerate(rows, 2):  # header was line 1
        if len(row) != width:
            raise DataError(f"ragged row {rowno}: {len(row)} columns, expected {width}")

    columns = {name: [row[col_of[name]] for row in rows] for name in field_columns}
    for name in numeric_fields or []:
        if name not in columns:
            raise DataError(f"numeric field '{name}' is not a field column")
        columns[name] = bucketize_numeric(columns[name], numeric_bins)

    field_rows = [
        [columns[name][i] for name in field_columns] for i in range(len(rows))
    ]
    vocab = build_vocabulary(field_rows, field_columns)

    labels = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        raw = row[col_of[label_column]]
        try:
            score = float(raw)
        except ValueError:
            raise DataError(f"row {i + 2}: non-numeric label {raw!r}") from None
        labels[i] = binarize_label(score, threshold)
    indices = np.stack([vocab.encode_row(r) for r in field_rows])
    return vocab, EncodedDataset(indices=indices, labels=labels)


# ---------------------------------------------------------------------------
# prepared-directory round trip


def write_split_file(path, dataset: EncodedDataset) -> None:
    """One example per line: label then the field indices, space-separated."""
    with open(path, "w", encoding="utf-8") as f:
        for label, idx in zip(dataset.labels, dataset.indices):
            f.write(f"{int(label)} " + " ".join(str(int(v)) for v in idx) + "\n")


def read_split_file(path, num_fields: int) -> EncodedDataset:
    labels = []
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != num_fields + 1:
                raise DataError(f"{path}:{lineno}: expected 1+{num_fields} integers")
            labels.append(int(parts[0]))
            rows.append([int(v) for v in parts[1:]])
    if not rows:
        return EncodedDataset(np.zeros((0, num_fields), dtype=np.int64), np.zeros(0, dtype=np.int64))
    return EncodedDataset(np.array(rows, dtype=np.int64), np.array(labels, dtype=np.int64))


def write_prepared(out_dir, vocab: Vocabulary, split: DatasetSplit) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fields.tsv", "w", encoding="utf-8") as f:
        f.write("field_index\tfield_name\tcardinality\n")
        for s in vocab.schemas:
            f.write(f"{s.field_index}\t{s.field_name}\t{s.cardinality}\n")
    vocab.save(out / "vocab.tsv")
    write_split_file(out / "train.txt", split.train)
    write_split_file(out / "valid.txt", split.valid)
    write_split_file(out / "test.txt", split.test)


def load_prepared(data_dir) -> tuple[Vocabulary, DatasetSplit]:
    data = Path(data_dir)
    fields_path = data / "fields.tsv"
    if not fields_path.exists():
        raise DataError(f"no prepared data at {data}: missing fields.tsv")
    names = []
    with open(fields_path, encoding="utf-8") as f:
        next(f)
        for line in f:
            if line.strip():
                _, name, _ = line.rstrip("\n").split("\t")
                names.append(name)
    vocab = Vocabulary.load(data / "vocab.tsv", names)
    f = vocab.num_fields
    split = DatasetSplit(
        train=read_split_file(data / "train.txt", f),
        valid=read_split_file(data / "valid.txt", f),
        test=read_split_file(data / "test.txt", f),
        split_seed=-1,
    )
    for part in (split.train, split.valid, split.test):
        for s in vocab.schemas:
            col = part.indices[:, s.field_index]
            if col.size and col.max() >= s.cardinality:
                raise DataError(
                    f"index out of range for field '{s.field_name}' in {data}"
                )
    return vocab, split
