"""
Checkpoint files.

Layout (all integers little-endian):

    magic        8 bytes   b"PLMCKPT1"
    header_len   8 bytes   unsigned
    header       header_len bytes of UTF-8 JSON, sorted keys
    payload      float32 tensors, row-major, concatenated in index order

Header fields: format_version, model_kind ("encoder" | "decoder"), config,
run_config, vocabulary, payload_bytes, extras, and tensors, a list of
{name, offset, shape} with byte offsets relative to the payload start.
The same format stores encoders (plus an optional task head) and latent
generators (variational head plus decoder).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from plm_kit.config import DecoderConfig, EncoderConfig, RunConfig
from plm_kit.data_io import TaskKind, TaskSpec
from plm_kit.encoder import EncoderModel, TaskHead, init_encoder
from plm_kit.errors import (
    BadMagicError,
    CheckpointBoundsError,
    CheckpointError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
    VocabularyMismatchError,
)
from plm_kit.generative import LatentGenerator, init_generator
from plm_kit.layers import Params, param
from plm_kit.tokenizer import VOCAB

MAGIC = b"PLMCKPT1"
FORMAT_VERSION = 1
_PREAMBLE = len(MAGIC) + 8
_DTYPE = np.dtype("<f4")

Model = Union[EncoderModel, LatentGenerator]


@dataclass
class CheckpointFile:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def model_kind(self) -> str:
        return self.header["model_kind"]


# ── Writing ───────────────────────────────────────────────


def _describe(model: Model) -> tuple[str, dict, Params, dict]:
    if isinstance(model, EncoderModel):
        params = dict(model.params)
        extras: dict = {"head": None, "task": None}
        if model.head is not None:
            params.update(model.head.params)
            extras["head"] = {
                "kind": model.head.kind.value,
                "num_classes": model.head.num_classes,
                "hidden": model.head.hidden,
            }
        if model.task is not None:
            extras["task"] = model.task.to_dict()
        return "encoder", asdict(model.config), params, extras
    if isinstance(model, LatentGenerator):
        extras = {
            "trained": model.decoder.trained,
            "head": {"input_dim": model.head.input_dim, "z_dim": model.head.z_dim},
        }
        return "decoder", asdict(model.decoder.config), model.parameters(), extras
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def checkpoint_bytes(model: Model, run_config: Optional[RunConfig] = None) -> bytes:
    kind, config, params, extras = _describe(model)
    index, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype=_DTYPE)
        index.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "model_kind": kind,
        "config": config,
        "run_config": run_config.to_dict() if run_config is not None else None,
        "vocabulary": VOCAB.to_list(),
        "payload_bytes": offset,
        "extras": extras,
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    blob = blob.encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def save_checkpoint(
    model: Model, path: Union[str, Path], run_config: Optional[RunConfig] = None
) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, run_config))
    return path


# ── Reading ───────────────────────────────────────────────


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> CheckpointFile:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{source}: bad magic, not a plm-kit checkpoint")
    if len(data) < _PREAMBLE:
        raise TruncatedCheckpointError(f"{source}: file ends inside the header length")
    (header_len,) = struct.unpack("<Q", data[len(MAGIC) : _PREAMBLE])
    if len(data) < _PREAMBLE + header_len:
        raise TruncatedCheckpointError(f"{source}: file ends inside the header")
    try:
        header = json.loads(data[_PREAMBLE : _PREAMBLE + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable header: {e}") from e

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{source}: format version {version} is not supported")
    if header.get("vocabulary") != VOCAB.to_list():
        raise VocabularyMismatchError(
            f"{source}: checkpoint was written with a different vocabulary"
        )

    payload = data[_PREAMBLE + header_len :]
    declared = int(header.get("payload_bytes", -1))
    if len(payload) < declared:
        raise TruncatedCheckpointError(
            f"{source}: payload has {len(payload)} bytes, header declares {declared}"
        )

    tensors: dict[str, np.ndarray] = {}
    end = 0
    for entry in header.get("tensors", []):
        name, offset, shape = entry["name"], int(entry["offset"]), tuple(entry["shape"])
        span = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset < end:
            raise CheckpointBoundsError(
                f"{source}: tensor '{name}' offset {offset} overlaps the previous tensor"
            )
        if offset + span > declared:
            raise CheckpointBoundsError(
                f"{source}: tensor '{name}' spans bytes {offset}..{offset + span}, "
                f"payload holds {declared}"
            )
        arr = np.frombuffer(payload, dtype=_DTYPE, count=span // _DTYPE.itemsize, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
        end = offset + span
    if end != declared:
        raise CheckpointBoundsError(
            f"{source}: tensor index covers {end} bytes, header declares {declared}"
        )
    return CheckpointFile(header=header, tensors=tensors)


def read_checkpoint(path: Union[str, Path]) -> CheckpointFile:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), source=str(path))


def _fill(params: Params, tensors: dict[str, np.ndarray], source: str) -> None:
    """Copy stored tensors into freshly built parameters, checking names and shapes."""
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointError(f"{source}: missing tensors {', '.join(missing[:5])}")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise CheckpointError(
                f"{source}: tensor '{name}' has shape {tensors[name].shape}, expected {p.shape}"
            )
        p.data = tensors[name].copy()


def _load_encoder(ckpt: CheckpointFile, source: str) -> EncoderModel:
    model = init_encoder(EncoderConfig(**ckpt.header["config"]))
    extras = ckpt.header.get("extras") or {}
    expected = set(model.params)
    head_info = extras.get("head")
    if head_info:
        kind = TaskKind.parse(head_info["kind"])
        head = TaskHead(
            kind=kind, num_classes=head_info["num_classes"], hidden=head_info["hidden"]
        )
        head.params = {
            name: param(arr.copy())
            for name, arr in ckpt.tensors.items()
            if name.startswith("head.")
        }
        model.head = head
        expected |= set(head.params)
    if extras.get("task"):
        model.task = TaskSpec.from_dict(extras["task"])
    extra = sorted(set(ckpt.tensors) - expected)
    if extra:
        raise CheckpointError(f"{source}: unexpected tensors {', '.join(extra[:5])}")
    _fill(model.params, ckpt.tensors, source)
    return model


def _load_generator(ckpt: CheckpointFile, source: str) -> LatentGenerator:
    config = DecoderConfig(**ckpt.header["config"])
    extras = ckpt.header.get("extras") or {}
    head_info = extras.get("head") or {}
    generator = init_generator(int(head_info.get("input_dim", config.hidden_dim)), config)
    params = generator.parameters()
    extra = sorted(set(ckpt.tensors) - set(params))
    if extra:
        raise CheckpointError(f"{source}: unexpected tensors {', '.join(extra[:5])}")
    _fill(params, ckpt.tensors, source)
    generator.decoder.trained = bool(extras.get("trained", False))
    return generator


def load_checkpoint(path: Union[str, Path]) -> Model:
    ckpt = read_checkpoint(path)
    kind = ckpt.model_kind
    if kind == "encoder":
        return _load_encoder(ckpt, str(path))
    if kind == "decoder":
        return _load_generator(ckpt, str(path))
    raise CheckpointError(f"{path}: unknown model_kind '{kind}'")


def load_encoder(path: Union[str, Path]) -> EncoderModel:
    model = load_checkpoint(path)
    if not isinstance(model, EncoderModel):
        raise CheckpointError(f"{path}: expected an encoder checkpoint, found a decoder")
    return model


def load_generator(path: Union[str, Path]) -> LatentGenerator:
    model = load_checkpoint(path)
    if not isinstance(model, LatentGenerator):
        raise CheckpointError(f"{path}: expected a decoder checkpoint, found an encoder")
    return model

