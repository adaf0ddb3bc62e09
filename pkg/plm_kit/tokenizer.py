"""
Protein vocabulary, sequence encoding and masked-LM corruption.

The 30-token table is five specials followed by
the 20 standard residues, the ambiguity code X and the rare letters U, B, Z, O.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from plm_kit.config import MaskingPolicy
from plm_kit.errors import EmptyDataError, ShapeError
from plm_kit.tensor import IGNORE_INDEX

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
RESIDUES = "ACDEFGHIKLMNPQRSTVWYXUBZO"
STANDARD_RESIDUES = "ACDEFGHIKLMNPQRSTVWY"

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
FIRST_RESIDUE_ID = len(SPECIAL_TOKENS)
UNKNOWN_RESIDUE = "X"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        object.__setattr__(self, "_index", MappingProxyType(index))

    @classmethod
    def standard(cls) -> Vocabulary:
        return cls(SPECIAL_TOKENS + tuple(RESIDUES))

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index[token]

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise ValueError(f"token id {token_id} outside [0, {len(self.tokens)})")
        return self.tokens[token_id]

    def residue_id(self, letter: str) -> int:
        """Id for a residue letter; anything outside the table maps to X."""
        return self._index.get(letter, self._index[UNKNOWN_RESIDUE])

    def to_list(self) -> list[str]:
        return list(self.tokens)


VOCAB = Vocabulary.standard()
VOCAB_DECODE = np.array(list(VOCAB.tokens), dtype=object)

# Byte-indexed lookup: every byte maps to X except the 25 residue letters.
_LOOKUP = np.full(256, VOCAB.id_of(UNKNOWN_RESIDUE), dtype=np.int64)
for _i, _letter in enumerate(RESIDUES):
    _LOOKUP[ord(_letter)] = FIRST_RESIDUE_ID + _i


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    attention_mask: np.ndarray
    true_length: int

    @property
    def max_len(self) -> int:
        return int(self.ids.shape[0])


@dataclass(frozen=True)
class TokenBatch:
    ids: np.ndarray             # (B, L) int64
    attention_mask: np.ndarray  # (B, L) int64, 1 = real token
    lengths: np.ndarray         # (B,) true lengths

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @classmethod
    def from_sequences(cls, sequences: Sequence[TokenSequence]) -> TokenBatch:
        if not sequences:
            raise EmptyDataError("cannot batch zero sequences")
        lengths = {s.max_len for s in sequences}
        if len(lengths) != 1:
            raise ShapeError(f"sequences in a batch must share max_len, got {sorted(lengths)}")
        return cls(
            ids=np.stack([s.ids for s in sequences]),
            attention_mask=np.stack([s.attention_mask for s in sequences]),
            lengths=np.array([s.true_length for s in sequences], dtype=np.int64),
        )

    def select(self, rows) -> TokenBatch:
        return TokenBatch(self.ids[rows], self.attention_mask[rows], self.lengths[rows])


# ── Encode / decode ───────────────────────────────────────


def normalize(sequence: str) -> str:
    """Uppercase, map letters outside the table to X."""
    return "".join(VOCAB_DECODE[_residue_ids(sequence.strip().upper())])


def _residue_ids(sequence: str) -> np.ndarray:
    raw = np.frombuffer(sequence.encode("utf-8", errors="replace"), dtype=np.uint8)
    if raw.size != len(sequence):
        # multibyte characters: map per character instead
        return np.array([VOCAB.residue_id(ch) for ch in sequence], dtype=np.int64)
    return _LOOKUP[raw]


def encode(sequence: str, max_len: int = 512) -> TokenSequence:
    if max_len < 3:
        raise ValueError(f"max_len must be at least 3, got {max_len}")
    residues = sequence.strip().upper()
    if not residues:
        raise EmptyDataError("cannot encode an empty sequence")
    body = _residue_ids(residues)[: max_len - 2]
    n = body.shape[0]

    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1 : n + 1] = body
    ids[n + 1] = SEP_ID
    mask = (ids != PAD_ID).astype(np.int64)
    return TokenSequence(ids=ids, attention_mask=mask, true_length=n + 2)


def encode_many(sequences: Iterable[str], max_len: int = 512) -> TokenBatch:
    """Encode and pad to the longest sequence in the batch (capped at max_len)."""
    encoded = [encode(s, max_len) for s in sequences]
    if not encoded:
        raise EmptyDataError("cannot batch zero sequences")
    width = max(t.true_length for t in encoded)
    return TokenBatch.from_sequences(
        [TokenSequence(t.ids[:width], t.attention_mask[:width], t.true_length) for t in encoded]
    )


def decode(ids: Iterable[int]) -> str:
    ids = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(VOCAB)):
        raise ValueError(f"token ids must be in [0, {len(VOCAB)})")
    residues = ids[ids >= FIRST_RESIDUE_ID]
    return "".join(VOCAB_DECODE[residues])


# ── Masked-LM corruption ──────────────────────────────────


def mask_ids(
    ids: np.ndarray, policy: MaskingPolicy, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt residue positions of ``ids`` (any shape). Returns (corrupted, labels)."""
    ids = np.asarray(ids, dtype=np.int64)
    selectable = ids >= FIRST_RESIDUE_ID
    selected = (rng.random(ids.shape) < policy.select_rate) & selectable
    action = rng.random(ids.shape)
    replacements = rng.integers(FIRST_RESIDUE_ID, len(VOCAB), size=ids.shape)

    to_mask = selected & (action < policy.mask_rate)
    to_random = selected & (action >= policy.mask_rate)
    to_random &= action < policy.mask_rate + policy.random_rate

    corrupted = ids.copy()
    corrupted[to_mask] = MASK_ID
    corrupted[to_random] = replacements[to_random]
    labels = np.where(selected, ids, IGNORE_INDEX)
    return corrupted, labels


def apply_mlm_mask(
    tokens: Union[TokenSequence, TokenBatch],
    policy: MaskingPolicy,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Masked-LM corruption; seeded from ``policy.seed`` unless an rng is passed."""
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    return mask_ids(tokens.ids, policy, rng)
