import numpy as np
import pytest

from dialectasr import ada as A
from dialectasr import corpus as C


def aligned_utt(i, speaker, words=("aa", "bb", "cc")):
    spans = []
    start = 0
    for wi, _ in enumerate(words):
        spans.append(C.WordSpan(word_index=wi, start_frame=start, end_frame=start + 6))
        start += 6
    return C.Utterance(id=f"u{i}", speaker_id=speaker, dialect_id="d0",
                       transcript=tuple(words), audio_path=f"u{i}.wav",
                       duration=start * C.HOP_SAMPLES / C.SAMPLE_RATE,
                       alignment=tuple(spans))


def toy_corpus(n_per_speaker=3, speakers=("s0", "s1"), n_words=3):
    utts = []
    i = 0
    for s in speakers:
        for _ in range(n_per_speaker):
            words = tuple(f"w{i}{j}" for j in range(n_words))
            utts.append(aligned_utt(i, s, words))
            i += 1
    return C.Corpus.from_utterances(utts)


# ---------------------------------------------------------------------------
# inventory


def test_inventory_counts_words_per_speaker():
    c = toy_corpus()
    inv = A.build_inventory(c)
    assert len(inv) == 18
    assert len(inv.by_speaker["s0"]) == 9
    assert {e.utterance_id for e in inv.by_speaker["s0"]} == {"u0", "u1", "u2"}


def test_inventory_requires_alignment():
    u = C.Utterance(id="u", speaker_id="s", dialect_id="d",
                    transcript=("a",), audio_path="u.wav")
    with pytest.raises(ValueError, match="u"):
        A.build_inventory(C.Corpus.from_utterances([u]))


# ---------------------------------------------------------------------------
# planning


def test_plan_zero_rate_empty():
    c = toy_corpus()
    p = A.plan(c, A.build_inventory(c), replace_rate=0.0, seed=0)
    assert p.replacements == {} and p.skipped == ()


def test_plan_rate_validation():
    c = toy_corpus()
    inv = A.build_inventory(c)
    with pytest.raises(ValueError):
        A.plan(c, inv, replace_rate=1.5)
    with pytest.raises(ValueError):
        A.plan(c, inv, replace_rate=-0.1)


def test_plan_k_rounding():
    # ten words at rate 0.2 -> exactly 2; three words -> round(0.6)=1;
    # tiny rate still replaces at least one word
    for n_words, rate, k in ((10, 0.2, 2), (3, 0.2, 1), (5, 0.01, 1), (4, 1.0, 4)):
        c = toy_corpus(n_per_speaker=2, speakers=("s0",), n_words=n_words)
        p = A.plan(c, A.build_inventory(c), replace_rate=rate, seed=1)
        assert all(len(reps) == k for reps in p.replacements.values())


def test_plan_same_speaker_other_utterance_only():
    c = toy_corpus(n_per_speaker=4, speakers=("s0", "s1", "s2"), n_words=5)
    inv = A.build_inventory(c)
    p = A.plan(c, inv, replace_rate=0.5, seed=3)
    by_id = {u.id: u for u in c}
    assert set(p.replacements) == set(by_id)
    for utt_id, reps in p.replacements.items():
        u = by_id[utt_id]
        donor_utts = {u2.id: u2 for u2 in c if u2.speaker_id == u.speaker_id}
        for wi, e in reps:
            assert 0 <= wi < len(u.transcript)
            assert e.utterance_id != utt_id
            assert e.utterance_id in donor_utts
        assert len({wi for wi, _ in reps}) == len(reps)


def test_plan_speaker_without_donors_skipped():
    utts = [aligned_utt(0, "solo"), aligned_utt(1, "pair"), aligned_utt(2, "pair")]
    c = C.Corpus.from_utterances(utts)
    p = A.plan(c, A.build_inventory(c), replace_rate=0.5, seed=0)
    assert p.skipped == ("u0",)
    assert "u0" not in p.replacements


def test_plan_deterministic():
    c = toy_corpus(n_per_speaker=5, n_words=6)
    inv = A.build_inventory(c)
    p1 = A.plan(c, inv, replace_rate=0.3, seed=42)
    p2 = A.plan(c, inv, replace_rate=0.3, seed=42)
    assert p1.replacements == p2.replacements and p1.skipped == p2.skipped


def test_plan_mean_replace_fraction_ten_word_utts():
    n = 10_000
    utts = [aligned_utt(i, f"s{i % 50}", tuple(f"w{j}" for j in range(10)))
            for i in range(n)]
    c = C.Corpus.from_utterances(utts)
    p = A.plan(c, A.build_inventory(c), replace_rate=0.2, seed=7)
    fracs = [len(p.replacements[u.id]) / 10 for u in c]
    assert len(fracs) == n
    assert abs(float(np.mean(fracs)) - 0.2) <= 0.01


# ---------------------------------------------------------------------------
# fades


def test_fade_junction_preserves_length_and_ramps():
    x = np.ones(400)
    A._fade_junction(x, 200)
    assert len(x) == 400
    assert np.array_equal(x[200 - A.CROSSFADE_SAMPLES:200],
                          np.linspace(1.0, 0.0, A.CROSSFADE_SAMPLES))
    assert np.array_equal(x[200:200 + A.CROSSFADE_SAMPLES],
                          np.linspace(0.0, 1.0, A.CROSSFADE_SAMPLES))
    assert np.all(x[:200 - A.CROSSFADE_SAMPLES] == 1.0)
    assert np.all(x[200 + A.CROSSFADE_SAMPLES:] == 1.0)


def test_fade_junction_clipped_at_edges():
    x = np.ones(100)
    A._fade_junction(x, 10)
    assert len(x) == 100
    assert x[0] == 1.0  # linspace(1, 0, 10) starts at 1


# ---------------------------------------------------------------------------
# apply (uses real synthesized audio)


def synth(tmp_path, seed=11):
    return C.synth_corpus(seed=seed, n_speakers=3, n_dialects=2,
                          n_unique_sentences=4, repetitions_per_sentence=3,
                          charset="abc", out_dir=tmp_path)


def test_apply_produces_augmented_variants(tmp_path):
    c = synth(tmp_path / "src")
    inv = A.build_inventory(c)
    p = A.plan(c, inv, replace_rate=0.3, seed=5)
    out = A.apply(c, p, tmp_path / "aug")
    originals = {u.id for u in c}
    new = [u for u in out if u.id not in originals]
    assert {u.id for u in out} >= originals
    assert len(new) == len(p.replacements)
    by_id = {u.id: u for u in c}
    for u in new:
        assert u.id.endswith(".ada")
        src = by_id[u.id[:-4]]
        reps = dict(p.replacements[src.id])
        assert len(u.transcript) == len(src.transcript)
        for wi, w in enumerate(u.transcript):
            if wi in reps:
                assert w == reps[wi].word
            else:
                assert w == src.transcript[wi]


def test_apply_alignments_tile_and_match_audio(tmp_path):
    c = synth(tmp_path / "src")
    p = A.plan(c, A.build_inventory(c), replace_rate=0.4, seed=6)
    out = A.apply(c, p, tmp_path / "aug")
    for u in out:
        if not u.id.endswith(".ada"):
            continue
        samples, sr = C.read_wav(u.audio_path)
        assert sr == C.SAMPLE_RATE
        assert u.alignment[0].start_frame == 0
        assert u.alignment[-1].end_sample == len(samples)
        for a, b in zip(u.alignment, u.alignment[1:]):
            assert a.end_frame == b.start_frame


def test_apply_replaced_segment_matches_donor_core(tmp_path):
    # away from the 80-sample junction fades, a spliced segment is
    # sample-identical to the donor word's audio
    c = synth(tmp_path / "src")
    p = A.plan(c, A.build_inventory(c), replace_rate=0.3, seed=8)
    out = A.apply(c, p, tmp_path / "aug")
    by_id = {u.id: u for u in c}
    checked = 0
    for u in out:
        if not u.id.endswith(".ada"):
            continue
        src = by_id[u.id[:-4]]
        reps = dict(p.replacements[src.id])
        samples, _ = C.read_wav(u.audio_path)
        for wi, span in enumerate(u.alignment):
            if wi not in reps:
                continue
            donor = reps[wi]
            donor_audio, _ = C.read_wav(donor.audio_path)
            seg = samples[span.start_sample:span.end_sample]
            ref = donor_audio[donor.span.start_sample:donor.span.end_sample]
            assert len(seg) == len(ref)
            F = A.CROSSFADE_SAMPLES
            if len(seg) > 2 * F + 32:
                core = slice(F, len(seg) - F)
                assert np.max(np.abs(seg[core] - ref[core])) <= 2 / 32768
                checked += 1
    assert checked > 0


def test_apply_byte_reproducible(tmp_path):
    c = synth(tmp_path / "src")
    p = A.plan(c, A.build_inventory(c), replace_rate=0.25, seed=9)
    o1 = A.apply(c, p, tmp_path / "a1")
    o2 = A.apply(c, p, tmp_path / "a2")
    for u1 in o1:
        if not u1.id.endswith(".ada"):
            continue
        u2 = next(u for u in o2 if u.id == u1.id)
        assert open(u1.audio_path, "rb").read() == open(u2.audio_path, "rb").read()
    m1 = (tmp_path / "a1" / "manifest.jsonl").read_text().replace(str(tmp_path / "a1"), "D")
    m2 = (tmp_path / "a2" / "manifest.jsonl").read_text().replace(str(tmp_path / "a2"), "D")
    assert m1.replace(str(tmp_path / "src"), "S") == m2.replace(str(tmp_path / "src"), "S")


# ---------------------------------------------------------------------------
# plan persistence


def test_plan_round_trip(tmp_path):
    c = toy_corpus(n_per_speaker=4, n_words=5)
    p = A.plan(c, A.build_inventory(c), replace_rate=0.4, seed=21)
    path = tmp_path / "plan.jsonl"
    A.write_plan(p, path)
    q = A.read_plan(path)
    assert q.replace_rate == p.replace_rate and q.seed == p.seed
    assert q.skipped == p.skipped
    assert set(q.replacements) == set(p.replacements)
    for utt_id in p.replacements:
        got = [(wi, e.word, e.utterance_id, e.span.start_frame, e.span.end_frame,
                e.audio_path) for wi, e in q.replacements[utt_id]]
        want = [(wi, e.word, e.utterance_id, e.span.start_frame, e.span.end_frame,
                 e.audio_path) for wi, e in p.replacements[utt_id]]
        assert got == want
