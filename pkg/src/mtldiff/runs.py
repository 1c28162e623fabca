"""Run-directory bookkeeping: manifest, lock file, metrics stream.

A run directory is the unit of reproducibility: it snapshots the exact
config bytes, holds every artifact the run produces, and records them in a
manifest.  A lock file guards against two processes writing the same run.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError, RunLockedError, VersionError

MANIFEST_MAGIC = "MTLDIFF-MANIFEST"
MANIFEST_VERSION = 1
METRICS_MAGIC = "MTLDIFF-METRICS"
METRICS_VERSION = 1

CONFIG_SNAPSHOT = "config.toml"
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.jsonl"
LOCK_FILE = ".lock"


@dataclass
class RunManifest:
    """What a run directory contains and how far the run has progressed."""

    seed: int
    config_sha256: str
    status: str = "running"
    iterations_done: int = 0
    artifacts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "format": MANIFEST_MAGIC,
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "config_sha256": self.config_sha256,
            "status": self.status,
            "iterations_done": self.iterations_done,
            "artifacts": self.artifacts,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, where: str = "manifest") -> "RunManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"{where}: not valid JSON ({e})") from e
        if not isinstance(doc, dict) or doc.get("format") != MANIFEST_MAGIC:
            raise FormatError(f"{where}: not a run manifest")
        if doc.get("version") != MANIFEST_VERSION:
            raise VersionError(f"{where}: unsupported manifest version {doc.get('version')!r}")
        try:
            return cls(
                seed=int(doc["seed"]),
                config_sha256=str(doc["config_sha256"]),
                status=str(doc["status"]),
                iterations_done=int(doc["iterations_done"]),
                artifacts=dict(doc["artifacts"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{where}: missing or malformed field ({e})") from e


def save_manifest(run_dir, manifest: RunManifest) -> None:
    path = Path(run_dir) / MANIFEST_FILE
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(manifest.to_json(), encoding="ascii")
    os.replace(tmp, path)


def load_manifest(run_dir) -> RunManifest:
    path = Path(run_dir) / MANIFEST_FILE
    if not path.exists():
        raise FormatError(f"{path}: no manifest; not a run directory")
    return RunManifest.from_json(path.read_text(encoding="ascii"), where=str(path))


def config_digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


class RunLock:
    """Exclusive lock on a run directory via an O_EXCL-created pid file."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / LOCK_FILE
        self._held = False

    def __enter__(self) -> "RunLock":
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            owner = "unknown"
            try:
                owner = self.path.read_text().strip() or owner
            except OSError:
                pass
            raise RunLockedError(
                f"{self.path.parent} is locked by pid {owner}; "
                "remove the lock file if that process is gone"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        self._held = True
        return self

    def __exit__(self, *exc):
        if self._held:
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass
            self._held = False
        return False


def init_run(run_dir, config_raw: bytes, seed: int) -> RunManifest:
    """Create a fresh run directory with the config snapshot and manifest.

    A directory that already contains a manifest must be resumed, not
    re-initialised.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if (run_dir / MANIFEST_FILE).exists():
        raise FormatError(f"{run_dir} already holds a run; use resume")
    (run_dir / CONFIG_SNAPSHOT).write_bytes(config_raw)
    manifest = RunManifest(seed=seed, config_sha256=config_digest(config_raw))
    manifest.artifacts["config"] = CONFIG_SNAPSHOT
    manifest.artifacts["metrics"] = METRICS_FILE
    save_manifest(run_dir, manifest)
    return manifest


def check_resume(run_dir, config_raw: bytes) -> RunManifest:
    """Validate that a run directory can continue under the given config.

    The config must be byte-identical to the snapshot taken at init;
    anything else would silently change the run halfway through.
    """
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    snapshot = (run_dir / CONFIG_SNAPSHOT).read_bytes()
    if snapshot != config_raw:
        raise FormatError(
            f"{run_dir}: config does not match the snapshot this run was started with"
        )
    if manifest.config_sha256 != config_digest(snapshot):
        raise FormatError(f"{run_dir}: config snapshot does not match the manifest digest")
    return manifest


class MetricsWriter:
    """Append-only JSONL metrics stream with a version header record.

    Records are buffered and flushed to disk every ``flush_every`` appends
    (and on close), keeping the write overhead off the training hot path.
    """

    def __init__(self, path, flush_every: int = 100, append: bool = False):
        self.path = Path(path)
        self.flush_every = flush_every
        fresh = not (append and self.path.exists() and self.path.stat().st_size > 0)
        self._f = open(self.path, "a" if not fresh else "w", encoding="ascii")
        self._pending = 0
        if fresh:
            header = {"format": METRICS_MAGIC, "version": METRICS_VERSION}
            self._f.write(json.dumps(header) + "\n")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record) + "\n")
        self._pending += 1
        if self._pending >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        self._f.flush()
        self._pending = 0

    def close(self) -> None:
        self.flush()
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path) -> list[dict]:
    """Read a metrics stream, validating the header record."""
    path = Path(path)
    records = []
    with open(path, "r", encoding="ascii") as f:
        first = f.readline()
        if not first:
            raise FormatError(f"{path}: empty metrics file")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: corrupt metrics header") from e
        if not isinstance(header, dict) or header.get("format") != METRICS_MAGIC:
            raise FormatError(f"{path}: not a metrics stream")
        if header.get("version") != METRICS_VERSION:
            raise VersionError(f"{path}: unsupported metrics version {header.get('version')!r}")
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: corrupt metrics record") from e
    return records


def truncate_metrics(path, max_step: int) -> None:
    """Drop metrics records past ``max_step`` (used when resuming from a
    checkpoint older than the last flush)."""
    path = Path(path)
    if not path.exists():
        return
    with open(path, "r", encoding="ascii") as f:
        lines = f.readlines()
    if not lines:
        return
    kept = [lines[0]]
    for line in lines[1:]:
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            break
        if isinstance(record, dict) and record.get("step", 0) > max_step:
            continue
        kept.append(line)
    tmp = path.with_suffix(".jsonl.tmp")
    with open(tmp, "w", encoding="ascii") as f:
        f.writelines(kept)
    os.replace(tmp, path)
