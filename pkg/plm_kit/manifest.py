"""
Run manifests.

Every CLI run that writes artifacts also writes ``<primary output>.manifest.json``:
the exact argv, the resolved config snapshot, the seed, and sha256 digests of
every input read and every output written. ``plm-kit replay`` re-executes the
argv and compares the new output digests with the recorded ones.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Union

from plm_kit import __version__
from plm_kit.errors import DataFormatError, ReplayMismatchError

MANIFEST_SUFFIX = ".manifest.json"
_CHUNK = 1 << 20


def file_digest(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(_CHUNK), b""):
            h.update(chunk)
    return h.hexdigest()


def digests(paths: Iterable[Union[str, Path]]) -> dict[str, str]:
    return {str(p): file_digest(p) for p in paths}


def manifest_path(primary: Union[str, Path]) -> Path:
    return Path(str(primary) + MANIFEST_SUFFIX)


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, source: str = "<manifest>") -> RunManifest:
        missing = [k for k in ("command", "argv", "config", "seed") if k not in data]
        if missing:
            raise DataFormatError(f"manifest is missing {', '.join(missing)}", source)
        return cls(
            command=data["command"],
            argv=list(data["argv"]),
            config=data["config"],
            seed=int(data["seed"]),
            inputs=dict(data.get("inputs", {})),
            outputs=dict(data.get("outputs", {})),
            tool_version=data.get("tool_version", __version__),
        )

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        path.write_text(text + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> RunManifest:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataFormatError(f"not valid JSON: {e.msg}", str(path), line=e.lineno) from e
        if not isinstance(data, dict):
            raise DataFormatError("manifest must be a JSON object", str(path))
        return cls.from_dict(data, str(path))

    # ── Verification ──────────────────────────────────────

    def check_inputs(self) -> None:
        """Inputs must still exist with the recorded digests before a replay."""
        _compare("input", self.inputs)

    def check_outputs(self) -> None:
        _compare("output", self.outputs)


def _compare(role: str, recorded: dict[str, str]) -> None:
    problems = []
    for name, expected in sorted(recorded.items()):
        if not Path(name).exists():
            problems.append(f"{role} {name} is missing")
            continue
        actual = file_digest(name)
        if actual != expected:
            problems.append(f"{role} {name}: sha256 {actual[:12]}… != recorded {expected[:12]}…")
    if problems:
        raise ReplayMismatchError("; ".join(problems))
