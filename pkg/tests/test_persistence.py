"""Corpus loading, record IO, snapshots, and resumable experiment state."""

import json

import pytest

from ttcbench.backend import SimulatedBackend, SimulatedProfile
from ttcbench.core import SimilarityLevel
from ttcbench.harness import GridConfig, run_grid
from ttcbench.memory import (
    EpisodicBuffer,
    Entry,
    MemoryMethod,
    RunningReflection,
)
from ttcbench.persistence import (
    CorpusError,
    ExperimentRunner,
    RunManifest,
    StateMismatchError,
    grid_config_hash,
    load_corpus,
    load_manifest,
    load_memory_snapshot,
    load_state,
    read_records,
    save_manifest,
    save_memory_snapshot,
    save_state,
    write_records,
)
from ttcbench.strategies import StrategyConfig, StrategyKind

VALID_LINE = {
    "id": "a-1",
    "backbone_id": "a",
    "similarity_level": "S1",
    "text": "What is 1 + 1?",
    "reference_answer": "2",
}


def write_corpus(tmp_path, lines, name="corpus.jsonl"):
    path = tmp_path / name
    path.write_text("\n".join(json.dumps(line) for line in lines) + "\n")
    return path


class TestLoadCorpus:
    def test_two_valid_lines(self, tmp_path):
        second = dict(VALID_LINE, id="a-2")
        corpus = load_corpus(write_corpus(tmp_path, [VALID_LINE, second]))
        assert len(corpus.questions) == 2
        assert len(corpus.sets) == 1
        assert corpus.sets[0].set_id == "a:S1"

    def test_groups_split_by_backbone_and_level(self, tmp_path):
        lines = [
            VALID_LINE,
            dict(VALID_LINE, id="a-2", similarity_level="S2"),
            dict(VALID_LINE, id="b-1", backbone_id="b"),
        ]
        corpus = load_corpus(write_corpus(tmp_path, lines))
        assert [s.set_id for s in corpus.sets] == ["a:S1", "a:S2", "b:S1"]

    def test_duplicate_id_rejected_by_name(self, tmp_path):
        with pytest.raises(CorpusError, match="duplicate question id 'a-1'"):
            load_corpus(write_corpus(tmp_path, [VALID_LINE, VALID_LINE]))

    def test_missing_field_names_line(self, tmp_path):
        broken = {k: v for k, v in VALID_LINE.items() if k != "similarity_level"}
        with pytest.raises(CorpusError, match="line 2: missing field 'similarity_level'"):
            load_corpus(write_corpus(tmp_path, [VALID_LINE, broken]))

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text(json.dumps(VALID_LINE) + "\n{oops\n")
        with pytest.raises(CorpusError, match="line 2: malformed JSON"):
            load_corpus(path)

    def test_invalid_level_rejected(self, tmp_path):
        with pytest.raises(CorpusError, match="invalid similarity_level"):
            load_corpus(write_corpus(tmp_path, [dict(VALID_LINE, similarity_level="S9")]))

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(CorpusError, match="no questions"):
            load_corpus(path)

    def test_digest_tracks_bytes(self, tmp_path):
        p1 = load_corpus(write_corpus(tmp_path, [VALID_LINE], name="c1.jsonl"))
        p2 = load_corpus(write_corpus(tmp_path, [dict(VALID_LINE, text="x?")], name="c2.jsonl"))
        assert p1.digest != p2.digest


class TestRecordIO:
    def test_round_trip(self, tmp_path):
        corpus = _corpus(tmp_path)
        records = run_grid(_grid(corpus))
        path = tmp_path / "records.csv"
        write_records(path, records)
        loaded = read_records(path)
        assert [r.to_row() for r in loaded] == [r.to_row() for r in records]


class TestMemorySnapshots:
    @pytest.mark.parametrize(
        "state",
        [
            EpisodicBuffer(entries=(Entry("q", "a", "b", "t"),)),
            RunningReflection(text="r", source_count=1, backbone_id="b"),
        ],
    )
    def test_file_round_trip(self, tmp_path, state):
        path = tmp_path / "memory.json"
        save_memory_snapshot(path, state)
        assert load_memory_snapshot(path) == state


def _corpus(tmp_path, count=4):
    lines = []
    for backbone in ("a", "b"):
        for i in range(count):
            lines.append(
                {
                    "id": f"{backbone}-{i}",
                    "backbone_id": backbone,
                    "similarity_level": "S1",
                    "text": f"q {i}",
                    "reference_answer": str(i),
                }
            )
    return load_corpus(write_corpus(tmp_path, lines))


def _grid(corpus, seed=0):
    return GridConfig(
        strategies=(StrategyConfig(kind=StrategyKind.BEST_OF_N),),
        memory_methods=(MemoryMethod.NONE, MemoryMethod.IN_CONTEXT),
        similarity_levels=(SimilarityLevel.S1,),
        corpus=corpus,
        backend=SimulatedBackend(SimulatedProfile(base_success=0.4, memory_gain=0.4, seed=3)),
        master_seed=seed,
        repetitions=2,
        question_sets=10,
    )


class TestManifest:
    def test_round_trip(self, tmp_path):
        manifest = RunManifest(
            config_hash="abc", master_seed=7, corpus_digest="d",
            completed=["u1"], created_at="t0", updated_at="t1",
            effective_config={"seed": "7"},
        )
        path = tmp_path / "manifest.json"
        save_manifest(path, manifest)
        assert load_manifest(path) == manifest

    def test_save_state_writes_snapshots(self, tmp_path):
        manifest = RunManifest(config_hash="h", master_seed=0, corpus_digest="d")
        save_state(tmp_path, manifest, {"cell0": EpisodicBuffer()})
        assert (tmp_path / "manifest.json").exists()
        assert load_memory_snapshot(tmp_path / "memory" / "cell0.json") == EpisodicBuffer()


class TestResume:
    def test_interrupted_run_resumes_byte_identically(self, tmp_path):
        corpus = _corpus(tmp_path)

        straight_dir = tmp_path / "straight"
        ExperimentRunner(straight_dir).run(_grid(corpus))

        resumed_dir = tmp_path / "resumed"
        runner = ExperimentRunner(resumed_dir)
        _, interrupted = runner.run(_grid(corpus), max_units=3)
        assert interrupted
        assert not runner.records_path.exists()
        records, interrupted = runner.run(_grid(corpus), resume=True)
        assert not interrupted
        assert (
            runner.records_path.read_bytes()
            == (straight_dir / "records.csv").read_bytes()
        )
        assert (
            runner.aggregates_path.read_bytes()
            == (straight_dir / "aggregates.csv").read_bytes()
        )

    def test_resume_with_edited_config_refused(self, tmp_path):
        corpus = _corpus(tmp_path)
        runner = ExperimentRunner(tmp_path / "out")
        runner.run(_grid(corpus), max_units=2)
        with pytest.raises(StateMismatchError, match="configuration changed"):
            runner.run(_grid(corpus, seed=999), resume=True)

    def test_resume_with_changed_corpus_refused(self, tmp_path):
        corpus = _corpus(tmp_path)
        runner = ExperimentRunner(tmp_path / "out")
        runner.run(_grid(corpus), max_units=2)
        (tmp_path / "sub").mkdir(exist_ok=True)
        other = _corpus(tmp_path / "sub", count=3)
        with pytest.raises(StateMismatchError, match="corpus changed"):
            runner.run(_grid(other), resume=True)

    def test_resume_without_prior_state_starts_fresh(self, tmp_path):
        corpus = _corpus(tmp_path)
        assert load_state(tmp_path / "nowhere", "h", "d") is None
        runner = ExperimentRunner(tmp_path / "fresh")
        records, interrupted = runner.run(_grid(corpus), resume=True)
        assert not interrupted
        assert records

    def test_completed_units_are_not_rerun(self, tmp_path):
        corpus = _corpus(tmp_path)
        runner = ExperimentRunner(tmp_path / "out")
        runner.run(_grid(corpus), max_units=3)
        manifest = load_manifest(runner.manifest_path)
        done_before = set(manifest.completed)
        runner.run(_grid(corpus), resume=True)
        manifest = load_manifest(runner.manifest_path)
        assert done_before <= set(manifest.completed)

    def test_worker_pool_preserves_output(self, tmp_path):
        corpus = _corpus(tmp_path)
        serial_dir, pooled_dir = tmp_path / "serial", tmp_path / "pooled"
        ExperimentRunner(serial_dir).run(_grid(corpus), workers=1)
        ExperimentRunner(pooled_dir).run(_grid(corpus), workers=4)
        assert (
            (serial_dir / "records.csv").read_bytes()
            == (pooled_dir / "records.csv").read_bytes()
        )


def test_config_hash_sensitive_to_fields(tmp_path):
    corpus = _corpus(tmp_path)
    assert grid_config_hash(_grid(corpus)) != grid_config_hash(_grid(corpus, seed=1))
