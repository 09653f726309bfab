import json
from pathlib import Path

import pytest

from dialectasr import corpus as C
from dialectasr.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def synth_args(out, seed=17, speakers=3, dialects=2, sentences=6, reps=3):
    return ("synth", "--out", out, "--seed", seed, "--speakers", speakers,
            "--dialects", dialects, "--sentences", sentences, "--reps", reps,
            "--charset", "abcdefgh")


def write_refs(manifest, path):
    c = C.read_manifest(manifest)
    with open(path, "w") as f:
        for u in c:
            f.write(f"{u.id}\t{' '.join(u.transcript)}\n")


# ---------------------------------------------------------------------------
# synth / stats


def test_synth_then_stats_counts(tmp_path, capsys):
    out = tmp_path / "corpus"
    assert run(*synth_args(out, speakers=4, dialects=2, sentences=5, reps=3)) == 0
    assert run("stats", "--manifest", out / "manifest.jsonl") == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["n_utterances"] == 5 * 3
    assert stats["n_speakers"] == 4
    assert stats["n_dialects"] == 2
    assert stats["n_unique_sentences"] == 5


def test_synth_writes_run_manifest(tmp_path):
    out = tmp_path / "corpus"
    assert run(*synth_args(out)) == 0
    record = json.loads((out / "manifest.jsonl.run.json").read_text())
    assert record["command"] == "synth"
    assert record["arguments"]["seed"] == 17
    assert any(p.endswith("manifest.jsonl") for p in record["outputs"])
    assert all(len(h) == 64 for h in record["outputs"].values())


# ---------------------------------------------------------------------------
# failure behavior


def test_unknown_flag_nonzero_exit():
    with pytest.raises(SystemExit) as e:
        run("synth", "--out", "x", "--seed", "1", "--no-such-flag")
    assert e.value.code != 0


def test_missing_input_nonzero_and_no_partial_output(tmp_path, capsys):
    out = tmp_path / "lm.arpa"
    rc = run("lm-train", "--manifest", tmp_path / "nope.jsonl", "--out", out)
    assert rc != 0
    assert "error:" in capsys.readouterr().err
    assert not out.exists()


# ---------------------------------------------------------------------------
# decode equivalences (trained once per session on a small corpus)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    model = root / "model.ckp"
    assert run(*synth_args(corpus, speakers=4, sentences=8, reps=4)) == 0
    assert run("train", "--manifest", corpus / "manifest.jsonl", "--out", model,
               "--seed", 17, "--epochs", 40) == 0
    refs = root / "ref.trn"
    write_refs(corpus / "manifest.jsonl", refs)
    return root, corpus / "manifest.jsonl", model, refs


def test_beam1_no_lm_equals_greedy(trained):
    root, manifest, model, _ = trained
    g, b = root / "greedy.trn", root / "beam1.trn"
    assert run("decode", "--manifest", manifest, "--model", model,
               "--out", g, "--mode", "greedy") == 0
    assert run("decode", "--manifest", manifest, "--model", model,
               "--out", b, "--mode", "beam", "--beam-width", 1, "--lm", "none") == 0
    assert g.read_text() == b.read_text()


def test_decode_jobs_deterministic_merge(trained):
    root, manifest, model, _ = trained
    a, b = root / "j1.trn", root / "j3.trn"
    assert run("decode", "--manifest", manifest, "--model", model, "--out", a,
               "--mode", "beam", "--beam-width", 4, "--jobs", 1) == 0
    assert run("decode", "--manifest", manifest, "--model", model, "--out", b,
               "--mode", "beam", "--beam-width", 4, "--jobs", 3) == 0
    assert a.read_text() == b.read_text()


def test_score_round_trip(trained, capsys):
    root, manifest, model, refs = trained
    hyp = root / "hyp.trn"
    assert run("decode", "--manifest", manifest, "--model", model,
               "--out", hyp, "--mode", "greedy") == 0
    assert run("score", "--ref", refs, "--hyp", hyp) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"wer", "cer", "n_utterances"}
    assert 0.0 <= report["wer"] <= 1.5 and report["n_utterances"] == 32


def test_score_self_is_zero(trained, capsys):
    _, _, _, refs = trained
    assert run("score", "--ref", refs, "--hyp", refs) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["wer"] == 0.0 and report["cer"] == 0.0


# ---------------------------------------------------------------------------
# experiment drivers


def test_exp_table4_same_seed_identical_tables(tmp_path, capsys):
    a, b = tmp_path / "runA", tmp_path / "runB"
    assert run("exp-table4", "--out", a, "--seed", 17) == 0
    out_a = capsys.readouterr().out
    assert run("exp-table4", "--out", b, "--seed", 17) == 0
    out_b = capsys.readouterr().out
    assert out_a == out_b
    assert (a / "result.json").read_bytes() == (b / "result.json").read_bytes()
    result = json.loads((a / "result.json").read_text())
    assert result["experiment"] == "prefix_adaptation"
    assert result["seed"] == 17
    assert [r["condition"] for r in result["rows"]] == [
        "backbone/no-lm", "backbone/with-lm", "prefix/no-lm", "prefix/with-lm"]
    assert all(0.0 <= r["wer"] <= 1.0 and 0.0 <= r["cer"] <= 1.0
               for r in result["rows"])
