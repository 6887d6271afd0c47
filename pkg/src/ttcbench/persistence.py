"""Durable storage: corpus loading with validation, record and aggregate
writers, memory snapshots, and resumable experiment state.

Formats are line-delimited throughout so a crash loses at most the last
line. Resume granularity is one grid unit (cell x set x repetition): records
of incomplete units are dropped and those units re-run, which reproduces an
uninterrupted run byte for byte under a fixed seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from .core import EngineError
from .core import Question, SimilarityLevel
from .harness import (
    AGGREGATE_FIELDS,
    AggregateView,
    Corpus,
    GridConfig,
    RECORD_FIELDS,
    RunRecord,
    aggregate_all,
    build_corpus,
    grid_units,
    record_sort_key,
    run_unit,
    unit_key_for_record,
)
from .memory import MemoryState, from_snapshot, to_snapshot


class CorpusError(EngineError):
    """Corpus file rejected; the message carries the offending line or id."""


class StateMismatchError(EngineError):
    """Saved experiment state does not match the requested configuration."""


MANIFEST_NAME = "manifest.json"
PARTIAL_RECORDS_NAME = "records_partial.csv"
RECORDS_NAME = "records.csv"
AGGREGATES_NAME = "aggregates.csv"

_REQUIRED_CORPUS_FIELDS = ("id", "backbone_id", "similarity_level", "text")


def load_corpus(path: str | Path) -> Corpus:
    """Parse and validate a line-delimited corpus file.

    Each line is one JSON object with id, backbone_id, similarity_level and
    text (reference_answer and knowledge_tag optional). Questions group into
    sets by (backbone, level) in file order.
    """
    path = Path(path)
    raw = path.read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    questions: list[Question] = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: malformed JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise CorpusError(f"line {lineno}: expected a JSON object")
        for name in _REQUIRED_CORPUS_FIELDS:
            if name not in obj:
                raise CorpusError(f"line {lineno}: missing field '{name}'")
        try:
            level = SimilarityLevel(obj["similarity_level"])
        except ValueError as exc:
            raise CorpusError(
                f"line {lineno}: invalid similarity_level {obj['similarity_level']!r}"
            ) from exc
        if obj["id"] in seen:
            raise CorpusError(f"line {lineno}: duplicate question id '{obj['id']}'")
        seen.add(obj["id"])
        try:
            questions.append(
                Question(
                    id=obj["id"],
                    backbone_id=obj["backbone_id"],
                    similarity_level=level,
                    text=obj["text"],
                    reference_answer=obj.get("reference_answer"),
                    knowledge_tag=obj.get("knowledge_tag"),
                )
            )
        except (ValueError, TypeError) as exc:
            raise CorpusError(f"line {lineno}: {exc}") from exc
    if not questions:
        raise CorpusError("corpus file contains no questions")
    return build_corpus(questions, digest)


# ---------------------------------------------------------------------------
# Records and aggregates
# ---------------------------------------------------------------------------

def write_records(path: str | Path, records: Sequence[RunRecord]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for record in records:
            writer.writerow(record.to_row())


def append_records(path: str | Path, records: Sequence[RunRecord]) -> None:
    """Append rows, creating the file with its header first if needed."""
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if new_file:
            writer.writerow(RECORD_FIELDS)
        for record in records:
            writer.writerow(record.to_row())
        handle.flush()


def read_records(path: str | Path) -> list[RunRecord]:
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        return [RunRecord.from_row(row) for row in reader]


def write_aggregates(path: str | Path, views: Sequence[AggregateView]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(AGGREGATE_FIELDS)
        for view in views:
            writer.writerow(view.to_row())


# ---------------------------------------------------------------------------
# Memory snapshots
# ---------------------------------------------------------------------------

def save_memory_snapshot(path: str | Path, memory: MemoryState) -> None:
    with open(path, "w") as handle:
        json.dump(to_snapshot(memory), handle, sort_keys=True, indent=2)


def load_memory_snapshot(path: str | Path) -> MemoryState:
    with open(path) as handle:
        return from_snapshot(json.load(handle))


# ---------------------------------------------------------------------------
# Manifest and resumable runs
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """What a run was configured as and how far it got."""

    config_hash: str
    master_seed: int
    corpus_digest: str
    completed: list[str] = field(default_factory=list)
    created_at: str = ""
    updated_at: str = ""
    effective_config: dict = field(default_factory=dict)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def grid_config_hash(grid: GridConfig) -> str:
    canonical = json.dumps(grid.config_fingerprint(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_manifest(path: str | Path, manifest: RunManifest) -> None:
    with open(path, "w") as handle:
        json.dump(asdict(manifest), handle, sort_keys=True, indent=2)


def load_manifest(path: str | Path) -> RunManifest:
    with open(path) as handle:
        return RunManifest(**json.load(handle))


def save_state(
    out_dir: str | Path,
    manifest: RunManifest,
    memory_snapshots: Optional[dict[str, MemoryState]] = None,
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(out_dir / MANIFEST_NAME, manifest)
    if memory_snapshots:
        snap_dir = out_dir / "memory"
        snap_dir.mkdir(exist_ok=True)
        for name, state in memory_snapshots.items():
            save_memory_snapshot(snap_dir / f"{name}.json", state)


def load_state(
    out_dir: str | Path, config_hash: str, corpus_digest: str
) -> Optional[tuple[RunManifest, list[RunRecord]]]:
    """Saved state for resuming, or None when there is none.

    Records belonging to units the manifest does not list as completed are
    dropped (they came from an interrupted unit and will be re-run).
    """
    out_dir = Path(out_dir)
    manifest_path = out_dir / MANIFEST_NAME
    if not manifest_path.exists():
        return None
    manifest = load_manifest(manifest_path)
    if manifest.config_hash != config_hash:
        raise StateMismatchError("refusing to resume: configuration changed since the run started")
    if manifest.corpus_digest != corpus_digest:
        raise StateMismatchError("refusing to resume: corpus changed since the run started")
    completed = set(manifest.completed)
    partial = out_dir / PARTIAL_RECORDS_NAME
    kept: list[RunRecord] = []
    if partial.exists():
        kept = [r for r in read_records(partial) if unit_key_for_record(r) in completed]
    return manifest, kept


class ExperimentRunner:
    """Executes a grid against an output directory, resumably.

    After every completed unit the records land in the partial log and the
    manifest's completed list is updated; once all units are done the final
    sorted records table and the aggregates are written.
    """

    def __init__(self, out_dir: str | Path) -> None:
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out_dir / MANIFEST_NAME
        self.partial_path = self.out_dir / PARTIAL_RECORDS_NAME
        self.records_path = self.out_dir / RECORDS_NAME
        self.aggregates_path = self.out_dir / AGGREGATES_NAME

    def run(
        self,
        grid: GridConfig,
        resume: bool = False,
        workers: int = 1,
        max_units: Optional[int] = None,
        effective_config: Optional[dict] = None,
    ) -> tuple[list[RunRecord], bool]:
        """Returns (records so far, interrupted flag).

        ``max_units`` caps how many new units this invocation processes,
        which is how tests simulate an interrupt.
        """
        config_hash = grid_config_hash(grid)
        kept: list[RunRecord] = []
        if resume:
            state = load_state(self.out_dir, config_hash, grid.corpus.digest)
        else:
            state = None
        if state is not None:
            manifest, kept = state
        else:
            now = _now()
            manifest = RunManifest(
                config_hash=config_hash,
                master_seed=grid.master_seed,
                corpus_digest=grid.corpus.digest,
                created_at=now,
                updated_at=now,
                effective_config=effective_config or {},
            )
        completed = set(manifest.completed)
        # rewrite the partial log without any interrupted unit's leftovers
        write_records(self.partial_path, kept)
        save_manifest(self.manifest_path, manifest)

        pending = [u for u in grid_units(grid) if u.key not in completed]
        to_run = pending if max_units is None else pending[: max(0, max_units)]
        lock = threading.Lock()
        collected = list(kept)

        def finish_unit(unit, records: list[RunRecord]) -> None:
            with lock:
                append_records(self.partial_path, records)
                collected.extend(records)
                completed.add(unit.key)
                manifest.completed = sorted(completed)
                manifest.updated_at = _now()
                save_manifest(self.manifest_path, manifest)

        if workers <= 1:
            for unit in to_run:
                finish_unit(unit, run_unit(grid, unit))
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(run_unit, grid, unit): unit for unit in to_run}
                for future, unit in futures.items():
                    finish_unit(unit, future.result())

        interrupted = len(to_run) < len(pending)
        collected.sort(key=record_sort_key)
        if not interrupted:
            write_records(self.records_path, collected)
            write_aggregates(self.aggregates_path, aggregate_all(collected))
        return collected, interrupted
