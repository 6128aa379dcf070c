import json

import pytest

from artifact_store import ArtifactStore, Tier
from config import LssSettings
from constants import EXIT_INVARIANT, EXIT_MALFORMED, EXIT_OK
from main import main


@pytest.fixture
def home(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("LSS_HOME", raising=False)
    return tmp_path / "home"


def lss(home, *argv):
    return main(["--home", str(home), *argv])


def test_bench_synthetic_writes_report(home, tmp_path, capsys):
    out = tmp_path / "results" / "bench.csv"
    assert lss(home, "bench", "--synthetic", "4", "--candidates", "10", "--out", str(out), "--format", "both") == EXIT_OK
    assert out.read_text(encoding="utf-8").startswith("query_id,variant,hit_at_k,top1,")
    assert out.with_suffix(".json").exists()
    printed = capsys.readouterr().out
    assert "RETRIEVAL BENCH SUMMARY" in printed
    assert "lens_index_worker" in printed


def test_bench_input_errors(home, tmp_path, capsys):
    assert lss(home, "bench", "--synthetic", "2", "--k", "0") == EXIT_MALFORMED
    assert "[ERROR] InputError" in capsys.readouterr().err
    assert lss(home, "bench", "--corpus", str(tmp_path / "missing.jsonl")) == EXIT_MALFORMED
    assert lss(home, "bench", "--synthetic", "2", "--reasoner", "oracle") == EXIT_MALFORMED
    with pytest.raises(SystemExit):
        lss(home, "bench")


def test_store_put_get_log_rollback(home, capsys):
    assert lss(home, "store", "put", "--kind", "skill", "--name", "parse", "--content", "first body\n") == EXIT_OK
    assert "[SUCCESS] Created skill-0001" in capsys.readouterr().out

    store = ArtifactStore(root=home, settings=LssSettings(home=home))
    store.revise_artifact("skill-0001", "second body\n", rationale="edit")

    assert lss(home, "store", "rollback", "skill-0001", "1") == EXIT_OK
    assert lss(home, "store", "get", "skill-0001") == EXIT_OK
    assert lss(home, "store", "get", "skill-0001", "--version", "2") == EXIT_OK
    assert lss(home, "store", "log", "skill-0001") == EXIT_OK
    out = capsys.readouterr().out
    assert "first body\nsecond body\n" in out
    assert out.count("\tcli\t") == 2
    assert "rollback to v1" in out

    assert lss(home, "store", "rollback", "skill-0001", "9") == EXIT_MALFORMED
    assert lss(home, "store", "get", "skill-0404") == EXIT_MALFORMED
    assert "VersionNotFound" in capsys.readouterr().err


def test_store_maintain_reports_duplicates(home, capsys):
    for _ in range(2):
        lss(home, "store", "put", "--kind", "skill", "--content", "same body\n")
    capsys.readouterr()
    assert lss(home, "store", "maintain") == EXIT_OK
    assert "duplicate\tskill-0001 skill-0002" in capsys.readouterr().out


def test_tampered_store_exits_with_invariant_code(home, capsys):
    lss(home, "store", "put", "--kind", "skill", "--name", "parse", "--content", "first body\n")
    path = home / "skill" / "skill-0001.md"
    path.write_text(path.read_text(encoding="utf-8").replace("first body", "edited by hand"), encoding="utf-8")

    assert lss(home, "store", "get", "skill-0001") == EXIT_INVARIANT
    assert "CorruptArtifact" in capsys.readouterr().err


def test_trace_prints_chain(home, capsys):
    lss(home, "store", "put", "--kind", "skill", "--content", "body\n")
    store = ArtifactStore(root=home, settings=LssSettings(home=home))
    record = store.migrate_tier("skill-0001", Tier.WARM, "manual")
    capsys.readouterr()

    assert lss(home, "trace", str(record.event_id)) == EXIT_OK
    assert "tier_migration" in capsys.readouterr().out
    assert lss(home, "trace", "999") == EXIT_MALFORMED


def test_run_replays_transcript(home, tmp_path, capsys):
    transcript = tmp_path / "run.json"
    transcript.write_text(json.dumps(["first answer\nINTENT: keep going", "second answer"]), encoding="utf-8")
    assert lss(home, "run", "--transcript", str(transcript), "--intent", "start") == EXIT_OK
    out = capsys.readouterr().out
    assert "-- output --\nfirst answer\nINTENT: keep going\n" in out
    assert "-- intent --\nkeep going\n" in out
    assert "[SUCCESS] worker ran 2 steps" in out

    assert lss(home, "run", "--transcript", str(tmp_path / "nope.json")) == EXIT_MALFORMED


def test_evolve_replays_and_merges(home, tmp_path, capsys):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({"tasks": [{"intent": "what is the answer", "expect": ["42"]}]}), encoding="utf-8")
    lss(home, "store", "put", "--kind", "prompt", "--content", "the answer is unknown\n")
    body = tmp_path / "body.md"
    body.write_text("the answer is 42\n", encoding="utf-8")
    capsys.readouterr()

    assert lss(home, "evolve", "--suite", str(suite)) == EXIT_OK
    assert "fitness 0.00 (0/1) on suite" in capsys.readouterr().out

    fitness = tmp_path / "fitness.tsv"
    assert lss(
        home, "evolve", "--suite", str(suite), "--patch", "prompt-0001",
        "--body", str(body), "--hypothesis", "state the answer", "--fitness-out", str(fitness),
    ) == EXIT_OK
    assert "[SUCCESS] Merged patch-0001 into prompt-0001" in capsys.readouterr().out
    assert len(fitness.read_text(encoding="utf-8").splitlines()) == 3
    assert ArtifactStore(root=home, settings=LssSettings(home=home)).get_artifact("prompt-0001").content == "the answer is 42\n"

    assert lss(home, "evolve", "--suite", str(suite), "--patch", "prompt-0001") == EXIT_MALFORMED
