"""
Synthetic desk-scale data.

Every generator is deterministic for a seed and returns plain Python data:
FASTA records for corpora, (sequence, label) rows for tasks. The tasks are
built so a small model can solve them from residue identity and local
context, which keeps convergence runs short.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from plm_kit.data_io import FastaRecord, Label, TaskKind
from plm_kit.tokenizer import STANDARD_RESIDUES

CHARGED = "DEKR"


def _alphabet(exclude: str = "") -> np.ndarray:
    return np.array([c for c in STANDARD_RESIDUES if c not in exclude])


def _random_string(rng: np.random.Generator, alphabet: np.ndarray, length: int) -> str:
    return "".join(rng.choice(alphabet, size=length))


def _lengths(rng: np.random.Generator, n: int, min_len: int, max_len: int) -> np.ndarray:
    if min_len <= 0 or max_len < min_len:
        raise ValueError(f"invalid length range [{min_len}, {max_len}]")
    return rng.integers(min_len, max_len + 1, size=n)


def protein_corpus(
    n: int,
    min_len: int = 24,
    max_len: int = 48,
    families: int = 4,
    period: int = 4,
    random_phase: bool = True,
    seed: int = 0,
) -> list[FastaRecord]:
    """Periodic sequences: each family repeats its own random motif of ``period`` residues."""
    rng = np.random.default_rng(seed)
    motifs = [_random_string(rng, _alphabet(), period) for _ in range(families)]
    records = []
    for i, length in enumerate(_lengths(rng, n, min_len, max_len)):
        family = int(rng.integers(families))
        phase = int(rng.integers(period)) if random_phase else 0
        repeated = motifs[family] * (int(length) // period + 2)
        sequence = repeated[phase : phase + int(length)]
        records.append(FastaRecord(f"syn{i} family={family}", sequence))
    return records


def motif_classification(
    n: int, min_len: int = 20, max_len: int = 40, motif: str = "WWW", seed: int = 0
) -> list[tuple[str, Label]]:
    """Class 1 iff the sequence contains ``motif``; negatives contain none of its letters."""
    rng = np.random.default_rng(seed)
    background = _alphabet(exclude=motif)
    rows: list[tuple[str, Label]] = []
    for i, length in enumerate(_lengths(rng, n, max(min_len, len(motif) + 1), max_len)):
        sequence = _random_string(rng, background, int(length))
        label = i % 2
        if label:
            at = int(rng.integers(0, len(sequence) - len(motif) + 1))
            sequence = sequence[:at] + motif + sequence[at + len(motif) :]
        rows.append((sequence, label))
    order = rng.permutation(n)
    return [rows[i] for i in order]


def residue_windows(
    n: int, min_len: int = 20, max_len: int = 40, windows: int = 2, seed: int = 0
) -> list[tuple[str, Label]]:
    """Per-residue labels: 1 inside charged windows of 3-6 residues, 0 elsewhere."""
    rng = np.random.default_rng(seed)
    background = _alphabet(exclude=CHARGED)
    charged = np.array(list(CHARGED))
    rows: list[tuple[str, Label]] = []
    for length in _lengths(rng, n, max(min_len, 8), max_len):
        residues = list(_random_string(rng, background, int(length)))
        labels = ["0"] * len(residues)
        for _ in range(int(rng.integers(1, windows + 1))):
            width = int(rng.integers(3, 7))
            at = int(rng.integers(0, len(residues) - width + 1))
            for j in range(at, at + width):
                residues[j] = str(rng.choice(charged))
                labels[j] = "1"
        rows.append(("".join(residues), "".join(labels)))
    return rows


def composition_regression(
    n: int, min_len: int = 20, max_len: int = 40, residue: str = "A", seed: int = 0
) -> list[tuple[str, Label]]:
    """Label is the fraction of ``residue`` in the sequence."""
    rng = np.random.default_rng(seed)
    others = _alphabet(exclude=residue)
    rows: list[tuple[str, Label]] = []
    for length in _lengths(rng, n, min_len, max_len):
        length = int(length)
        count = int(rng.integers(0, length + 1))
        letters = np.concatenate([np.full(count, residue), rng.choice(others, size=length - count)])
        rng.shuffle(letters)
        rows.append(("".join(letters), count / length))
    return rows


def task_rows(kind: TaskKind, n: int, seed: int = 0, **kwargs) -> list[tuple[str, Label]]:
    generator = {
        TaskKind.SEQUENCE_CLASSIFICATION: motif_classification,
        TaskKind.TOKEN_CLASSIFICATION: residue_windows,
        TaskKind.SEQUENCE_REGRESSION: composition_regression,
    }[TaskKind.parse(kind)]
    return generator(n, seed=seed, **kwargs)


def sequences_of(records: Sequence[FastaRecord]) -> list[str]:
    return [r.sequence for r in records]
