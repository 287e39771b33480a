"""Artifact persistence: JSONL corpora, file hashes and run manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .env import Trajectory

MANIFEST_DIR = "manifests"


class ArtifactError(RuntimeError):
    """A required input artifact is missing or fails verification."""


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dumps(doc) -> str:
    return json.dumps(doc, separators=(",", ":"))


def write_jsonl(path: str | Path, docs: Iterable[dict]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for doc in docs:
                fh.write(dumps(doc) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def read_jsonl(path: str | Path) -> Iterator[dict]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ArtifactError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def save_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> Path:
    return write_jsonl(path, (t.to_json() for t in trajectories))


def load_trajectories(path: str | Path) -> list[Trajectory]:
    out = []
    for i, doc in enumerate(read_jsonl(path)):
        try:
            out.append(Trajectory.from_json(doc))
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(f"{path}: record {i} is not a valid trajectory ({exc})") from None
    return out


@dataclass
class RunManifest:
    command: str
    config_hash: str
    master_seed: int
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)
    duration_seconds: float = 0.0
    tool_version: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "RunManifest":
        return cls(**doc)


def hash_files(paths: Iterable[str | Path], root: str | Path) -> dict[str, str]:
    root = Path(root)
    out = {}
    for p in paths:
        p = Path(p)
        key = str(p.relative_to(root)) if p.is_relative_to(root) else str(p)
        out[key] = sha256_file(p)
    return dict(sorted(out.items()))


def write_manifest(run_dir: str | Path, manifest: RunManifest) -> Path:
    path = Path(run_dir) / MANIFEST_DIR / f"{manifest.command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(run_dir: str | Path, manifest: RunManifest) -> list[str]:
    """Return the recorded files whose current hash differs or that are gone."""
    root = Path(run_dir)
    bad = []
    for rel, digest in {**manifest.inputs, **manifest.outputs}.items():
        p = Path(rel) if Path(rel).is_absolute() else root / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad
