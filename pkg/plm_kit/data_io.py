"""
Corpus and task-dataset ingestion.

FASTA parsing is streaming: records are yielded as soon as the next header
(or end of input) is seen. Task data is a CSV with the header
``sequence,label[,split]``. Splits are derived from the portable PRNG in
plm_kit.rng so they are identical across platforms.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from plm_kit.errors import DataFormatError, EmptyDataError, TaskMismatchError
from plm_kit.rng import Xoshiro256, permutation
from plm_kit.tensor import IGNORE_INDEX
from plm_kit.tokenizer import TokenBatch, encode_many

SPLIT_NAMES = ("train", "valid", "test")
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)

Label = Union[int, str, float]


# ── Task declarations ─────────────────────────────────────


class TaskKind(str, Enum):
    SEQUENCE_CLASSIFICATION = "sequence-classification"
    TOKEN_CLASSIFICATION = "token-classification"
    SEQUENCE_REGRESSION = "sequence-regression"

    @classmethod
    def parse(cls, value: Union[str, TaskKind]) -> TaskKind:
        if isinstance(value, TaskKind):
            return value
        try:
            return cls(value.strip().lower().replace("_", "-"))
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise TaskMismatchError(f"Unknown task kind '{value}'. Choose from: {choices}")


class Metric(str, Enum):
    ACCURACY = "accuracy"
    AUC_ROC = "auc_roc"
    SPEARMAN = "spearman"


METRIC_FOR_KIND = {
    TaskKind.SEQUENCE_CLASSIFICATION: Metric.ACCURACY,
    TaskKind.TOKEN_CLASSIFICATION: Metric.AUC_ROC,
    TaskKind.SEQUENCE_REGRESSION: Metric.SPEARMAN,
}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: TaskKind
    num_classes: Optional[int] = None
    metric: Optional[Metric] = None

    def __post_init__(self):
        kind = TaskKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        metric = METRIC_FOR_KIND[kind] if self.metric is None else Metric(self.metric)
        if metric is not METRIC_FOR_KIND[kind]:
            raise TaskMismatchError(
                f"metric '{metric.value}' does not apply to {kind.value} "
                f"(expected '{METRIC_FOR_KIND[kind].value}')"
            )
        object.__setattr__(self, "metric", metric)
        if kind is TaskKind.TOKEN_CLASSIFICATION:
            if self.num_classes not in (None, 2):
                raise TaskMismatchError("token-classification labels are binary (num_classes = 2)")
            object.__setattr__(self, "num_classes", 2)
        elif kind is TaskKind.SEQUENCE_REGRESSION:
            if self.num_classes not in (None, 1):
                raise TaskMismatchError("sequence-regression has no classes")
            object.__setattr__(self, "num_classes", None)
        elif self.num_classes is not None and self.num_classes < 2:
            raise TaskMismatchError("sequence-classification needs at least 2 classes")

    @property
    def is_classification(self) -> bool:
        return self.kind is not TaskKind.SEQUENCE_REGRESSION

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "num_classes": self.num_classes,
            "metric": self.metric.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> TaskSpec:
        return cls(
            name=data["name"],
            kind=TaskKind.parse(data["kind"]),
            num_classes=data.get("num_classes"),
            metric=Metric(data["metric"]) if data.get("metric") else None,
        )


@dataclass
class Dataset:
    spec: TaskSpec
    records: list[tuple[str, Label]]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def split_records(self, name: str) -> list[tuple[str, Label]]:
        if name not in self.splits:
            raise EmptyDataError(f"dataset '{self.spec.name}' has no '{name}' split")
        return [self.records[i] for i in self.splits[name]]


# ── FASTA ─────────────────────────────────────────────────


@dataclass(frozen=True)
class FastaRecord:
    header: str
    sequence: str


def parse_fasta(stream: Iterable, source: str = "<stream>") -> Iterator[FastaRecord]:
    """Yield records in file order from a text or binary line stream."""
    header: Optional[str] = None
    header_line = 0
    chunks: list[str] = []

    def finish() -> FastaRecord:
        sequence = "".join(chunks)
        if not sequence:
            raise DataFormatError(
                f"empty sequence under header '>{header}'", source, line=header_line
            )
        return FastaRecord(header, sequence)

    for lineno, raw in enumerate(stream, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        line = line.rstrip("\r\n")
        if line.startswith(">"):
            if header is not None:
                yield finish()
            header, header_line, chunks = line[1:], lineno, []
        elif line.strip():
            if header is None:
                raise DataFormatError(
                    "sequence data before the first '>' header", source, line=lineno
                )
            chunks.append("".join(line.split()))

    if header is not None:
        yield finish()


def read_fasta(path: Union[str, Path]) -> list[FastaRecord]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(parse_fasta(f, source=str(path)))


def write_fasta(records: Iterable[FastaRecord], stream: IO[str], line_width: int = 60) -> None:
    if line_width <= 0:
        raise ValueError("line_width must be positive")
    for rec in records:
        stream.write(f">{rec.header}\n")
        for start in range(0, len(rec.sequence), line_width):
            stream.write(rec.sequence[start : start + line_width] + "\n")


def save_fasta(
    records: Iterable[FastaRecord], path: Union[str, Path], line_width: int = 60
) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        write_fasta(records, f, line_width)


def filter_by_length(records: Iterable[FastaRecord], max_len: int) -> list[FastaRecord]:
    """Keep records whose residues plus [CLS]/[SEP] fit in max_len tokens."""
    return [r for r in records if len(r.sequence) + 2 <= max_len]


# ── Task CSV ──────────────────────────────────────────────


def _parse_label(raw: str, sequence: str, spec: TaskSpec, source: str, row: int) -> Label:
    raw = raw.strip()
    if spec.kind is TaskKind.SEQUENCE_CLASSIFICATION:
        try:
            label = int(raw)
        except ValueError:
            raise DataFormatError(f"class label '{raw}' is not an integer", source, row=row)
        if label < 0:
            raise DataFormatError(f"class label {label} is negative", source, row=row)
        if spec.num_classes is not None and label >= spec.num_classes:
            raise DataFormatError(
                f"class label {label} outside [0, {spec.num_classes})", source, row=row
            )
        return label
    if spec.kind is TaskKind.TOKEN_CLASSIFICATION:
        if not raw or set(raw) - {"0", "1"}:
            raise DataFormatError(f"token labels '{raw}' must be a 0/1 string", source, row=row)
        if len(raw) != len(sequence):
            raise DataFormatError(
                f"token labels have length {len(raw)} "
                f"but the sequence has {len(sequence)} residues",
                source,
                row=row,
            )
        return raw
    try:
        value = float(raw)
    except ValueError:
        raise DataFormatError(f"regression label '{raw}' is not a number", source, row=row)
    if not math.isfinite(value):
        raise DataFormatError(f"regression label '{raw}' is not finite", source, row=row)
    return value


def load_task_csv(
    path: Union[str, Path],
    spec: TaskSpec,
    seed: int = 0,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
) -> Dataset:
    source = str(path)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise EmptyDataError(f"{source}: file is empty")
        columns = [c.strip().lower() for c in header]
        if columns not in (["sequence", "label"], ["sequence", "label", "split"]):
            raise DataFormatError(
                f"header must be 'sequence,label[,split]', got '{','.join(header)}'", source, row=1
            )
        has_split = len(columns) == 3

        records: list[tuple[str, Label]] = []
        split_of: list[str] = []
        for row_num, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise DataFormatError(
                    f"expected {len(columns)} columns, got {len(row)}", source, row=row_num
                )
            sequence = row[0].strip().upper()
            if not sequence:
                raise DataFormatError("empty sequence", source, row=row_num)
            records.append((sequence, _parse_label(row[1], sequence, spec, source, row_num)))
            if has_split:
                name = row[2].strip().lower()
                if name not in SPLIT_NAMES:
                    raise DataFormatError(
                        f"unknown split '{row[2]}' (expected one of {', '.join(SPLIT_NAMES)})",
                        source,
                        row=row_num,
                    )
                split_of.append(name)

    if not records:
        raise EmptyDataError(f"{source}: no data rows")

    if spec.kind is TaskKind.SEQUENCE_CLASSIFICATION and spec.num_classes is None:
        largest = max(int(lbl) for _, lbl in records)
        spec = dataclasses.replace(spec, num_classes=max(2, largest + 1))

    dataset = Dataset(spec=spec, records=records)
    if has_split:
        dataset.splits = {
            name: [i for i, s in enumerate(split_of) if s == name] for name in SPLIT_NAMES
        }
        return dataset
    return split(dataset, fractions, seed)


def write_task_csv(
    rows: Iterable[tuple[str, Label]],
    path: Union[str, Path],
    splits: Optional[Sequence[str]] = None,
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sequence", "label", "split"] if splits else ["sequence", "label"])
        for i, (sequence, label) in enumerate(rows):
            value = repr(label) if isinstance(label, float) else label
            writer.writerow([sequence, value, splits[i]] if splits else [sequence, value])


# ── Splits and batching ───────────────────────────────────


def split(
    dataset: Dataset, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0
) -> Dataset:
    """Deterministic train/valid/test split.

    Valid and test sizes are floored; train takes the rest.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be three positive numbers (train, valid, test)")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset.records)
    n_valid = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    n_train = n - n_valid - n_test
    order = permutation(n, seed)
    splits = {
        "train": sorted(order[:n_train]),
        "valid": sorted(order[n_train : n_train + n_valid]),
        "test": sorted(order[n_train + n_valid :]),
    }
    return dataclasses.replace(dataset, splits=splits)


@dataclass(frozen=True)
class LabeledBatch:
    tokens: TokenBatch
    labels: np.ndarray
    indices: list[int]


def token_labels(labels: Sequence[str], width: int) -> np.ndarray:
    """(B, width) per-token targets aligned with [CLS] residues [SEP].

    Specials and padding get IGNORE_INDEX.
    """
    out = np.full((len(labels), width), IGNORE_INDEX, dtype=np.int64)
    for row, text in enumerate(labels):
        values = np.frombuffer(text.encode("ascii"), dtype=np.uint8)[: width - 2] - ord("0")
        out[row, 1 : 1 + values.shape[0]] = values
    return out


def _label_array(spec: TaskSpec, labels: list[Label], width: int) -> np.ndarray:
    if spec.kind is TaskKind.TOKEN_CLASSIFICATION:
        return token_labels(labels, width)
    if spec.kind is TaskKind.SEQUENCE_REGRESSION:
        return np.asarray(labels, dtype=np.float64)
    return np.asarray(labels, dtype=np.int64)


def batch_iter(
    dataset: Dataset,
    split_name: str,
    batch_size: int,
    max_len: int,
    shuffle_seed: Optional[int] = None,
) -> Iterator[LabeledBatch]:
    """Padded batches over one split; the last partial batch is emitted."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    indices = list(dataset.splits.get(split_name, []))
    if not indices:
        raise EmptyDataError(f"split '{split_name}' of dataset '{dataset.spec.name}' is empty")
    if shuffle_seed is not None:
        Xoshiro256(shuffle_seed).shuffle(indices)
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        sequences = [dataset.records[i][0] for i in chunk]
        tokens = encode_many(sequences, max_len)
        labels = _label_array(dataset.spec, [dataset.records[i][1] for i in chunk], tokens.shape[1])
        yield LabeledBatch(tokens=tokens, labels=labels, indices=chunk)


def batch_sequences(
    sequences: Sequence[str], batch_size: int, max_len: int, shuffle_seed: Optional[int] = None
) -> Iterator[TokenBatch]:
    """Padded batches over an unlabeled corpus."""
    if not sequences:
        raise EmptyDataError("corpus is empty")
    order = list(range(len(sequences)))
    if shuffle_seed is not None:
        Xoshiro256(shuffle_seed).shuffle(order)
    for start in range(0, len(order), batch_size):
        yield encode_many([sequences[i] for i in order[start : start + batch_size]], max_len)
