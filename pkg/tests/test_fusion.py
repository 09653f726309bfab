import itertools

import numpy as np
import pytest

from dialectasr import fusion as F
from dialectasr.nbest import Hypothesis, NBestList
from dialectasr.score import wer


def nb(utt, *hyps):
    return NBestList(
        utterance_id=utt,
        hypotheses=tuple(Hypothesis(words=tuple(w.split()), am_score=a, lm_score=l)
                         for w, a, l in hyps),
    )


# ---------------------------------------------------------------------------
# Nelder-Mead


def test_nm_quadratic():
    target = np.array([1.3, -2.1])
    res = F.nelder_mead(lambda x: float(np.sum((x - target) ** 2)), np.zeros(2))
    assert np.max(np.abs(res.x - target)) < 1e-5
    assert res.fx < 1e-9


def test_nm_rosenbrock_multi_start():
    def rosen(x):
        return float(100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2)

    starts = [np.array([a, b]) for a in (-1.0, 0.0, 2.0) for b in (-1.0, 0.0, 2.0)]
    res = F.nelder_mead(rosen, np.array([-1.2, 1.0]), starts=starts, max_iter=500)
    assert res.fx < 1e-6


def test_nm_constant_objective_terminates():
    res = F.nelder_mead(lambda x: 3.0, np.array([5.0, 5.0]))
    assert res.fx == 3.0


def test_nm_never_worse_than_best_start():
    def f(x):
        return float(np.sum(np.floor(np.abs(x))))  # nasty plateaus

    starts = [np.array([0.2, 0.2]), np.array([7.0, 7.0])]
    res = F.nelder_mead(f, np.array([3.0, 3.0]), starts=starts)
    assert res.fx <= min(f(s) for s in [np.array([3.0, 3.0])] + starts)


def test_nm_rejects_non_finite_start():
    with pytest.raises(ValueError):
        F.nelder_mead(lambda x: float("nan"), np.zeros(2))


# ---------------------------------------------------------------------------
# rescoring


def test_rescore_reorders_by_combined_score():
    lst = nb("u", ("b", 0.0, -2.0), ("a", -1.0, -0.1))
    top = F.rescore(lst, F.SystemWeights(lm_weight=1.0)).hypotheses[0]
    assert top.words == ("a",)  # -1.1 beats -2.0
    top = F.rescore(lst, F.SystemWeights(lm_weight=0.0)).hypotheses[0]
    assert top.words == ("b",)


def test_rescore_length_weight():
    lst = nb("u", ("a", -1.0, 0.0), ("a b c", -1.5, 0.0))
    top = F.rescore(lst, F.SystemWeights(lm_weight=0.0, length_weight=0.3)).hypotheses[0]
    assert top.words == ("a", "b", "c")  # -1.5 + 0.9 beats -1.0 + 0.3


def test_rescore_tie_lexicographic():
    lst = nb("u", ("b x", -1.0, 0.0), ("a x", -1.0, 0.0))
    top = F.rescore(lst, F.SystemWeights()).hypotheses[0]
    assert top.words == ("a", "x")


def test_system_weights_validation():
    with pytest.raises(ValueError):
        F.SystemWeights(posterior_scale=0.0)


# ---------------------------------------------------------------------------
# system weight optimization (grid oracle)


def constructed_dev():
    # utterance 1 needs w_lm > ~0.53, utterance 2 needs w_lm < 1
    nbs = [
        nb("u1", ("b", 0.0, -2.0), ("a", -1.0, -0.1)),
        nb("u2", ("c", 0.0, -3.0), ("d", -1.0, -2.0)),
        nb("u3", ("e f", -0.2, -1.0), ("e g", -0.3, -1.1)),
    ]
    refs = [("a",), ("c",), ("e", "f")]
    return nbs, refs


def test_optimize_system_weights_matches_grid_oracle():
    nbs, refs = constructed_dev()
    w = F.optimize_system_weights(nbs, refs)
    got = F._dev_wer(nbs, refs, w)
    grid_best = min(
        F._dev_wer(nbs, refs, F.SystemWeights(lm, ln))
        for lm in np.arange(0.0, 4.0 + 1e-9, 0.1)
        for ln in np.arange(0.0, 4.0 + 1e-9, 0.1)
    )
    assert got <= grid_best + 1e-12
    assert got == 0.0
    assert w.posterior_scale == pytest.approx(max(1.0, 1.0 / w.lm_weight))


def test_optimize_system_weights_not_worse_than_default():
    rng = np.random.default_rng(0)
    nbs, refs = [], []
    vocab = ["a", "b", "c"]
    for i in range(6):
        ref = tuple(vocab[int(j)] for j in rng.integers(0, 3, 2))
        hyps = [(" ".join(ref), float(rng.normal()), float(rng.normal()))]
        for _ in range(2):
            w = " ".join(vocab[int(j)] for j in rng.integers(0, 3, 2))
            hyps.append((w, float(rng.normal()), float(rng.normal())))
        nbs.append(nb(f"u{i}", *hyps))
        refs.append(ref)
    w = F.optimize_system_weights(nbs, refs)
    assert F._dev_wer(nbs, refs, w) <= F._dev_wer(nbs, refs, F.SystemWeights()) + 1e-12


def test_optimize_system_weights_validation():
    with pytest.raises(ValueError):
        F.optimize_system_weights([], [])
    with pytest.raises(ValueError):
        F.optimize_system_weights([nb("u", ("a", 0, 0))], [])


# ---------------------------------------------------------------------------
# posteriors


def test_posteriors_single_hypothesis():
    p = F.posteriors(nb("u", ("a", -1.0, -1.0)), F.SystemWeights())
    assert p == pytest.approx([1.0])


def test_posteriors_equal_scores_split():
    p = F.posteriors(nb("u", ("a", -1.0, 0.0), ("b", -1.0, 0.0)), F.SystemWeights())
    assert p == pytest.approx([0.5, 0.5], abs=1e-12)


def test_posteriors_high_scale_concentrates():
    w = F.SystemWeights(lm_weight=0.0, posterior_scale=100.0)
    p = F.posteriors(nb("u", ("a", 0.0, 0.0), ("b", -1.0, 0.0)), w)
    assert p[0] > 0.99
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# confusion networks


def uniform_sw(n):
    return [F.SystemWeights() for _ in range(n)]


def test_build_cn_two_system_hand_case():
    # A says "a b" with mass 0.6, B says "a c" with 0.4
    a = nb("u", ("a b", 0.0, 0.0))
    b = nb("u", ("a c", 0.0, 0.0))
    cn = F.build_cn([a, b], F.CombinationWeights(weights=(0.6, 0.4)), uniform_sw(2))
    assert len(cn.slots) == 2
    assert cn.slots[0] == pytest.approx({"a": 1.0, F.EPSILON: 0.0})
    assert cn.slots[1]["b"] == pytest.approx(0.6)
    assert cn.slots[1]["c"] == pytest.approx(0.4)
    assert F.decode_cn(cn) == ("a", "b")


def test_cn_slots_sum_to_one():
    rng = np.random.default_rng(1)
    vocab = ["a", "b", "c", "d"]
    for _ in range(20):
        systems = []
        for _s in range(int(rng.integers(1, 4))):
            hyps = []
            for _h in range(int(rng.integers(1, 4))):
                L = int(rng.integers(0, 5))
                w = " ".join(vocab[int(i)] for i in rng.integers(0, 4, L))
                hyps.append((w, float(rng.normal()), float(rng.normal())))
            systems.append(nb("u", *hyps))
        k = len(systems)
        cw = F.CombinationWeights(weights=tuple([1.0 / k] * k))
        cn = F.build_cn(systems, cw, uniform_sw(k))
        for slot in cn.slots:
            assert sum(slot.values()) == pytest.approx(1.0, abs=1e-6)


def test_decode_cn_epsilon_emits_nothing():
    cn = F.ConfusionNetwork(slots=[{F.EPSILON: 0.7, "x": 0.3}])
    assert F.decode_cn(cn) == ()


def test_decode_cn_tie_breaks():
    cn = F.ConfusionNetwork(slots=[{"b": 0.5, "a": 0.5, F.EPSILON: 0.0}])
    assert F.decode_cn(cn) == ("a",)
    cn = F.ConfusionNetwork(slots=[{F.EPSILON: 0.5, "z": 0.5}])
    assert F.decode_cn(cn) == ("z",)


def test_single_hypothesis_cn_is_identity():
    lst = nb("u", ("x y z", -0.5, -0.5))
    cn = F.build_cn([lst], F.CombinationWeights(weights=(1.0,)), uniform_sw(1))
    assert F.decode_cn(cn) == ("x", "y", "z")


def test_self_fusion_idempotent():
    lst = nb("u", ("a b", 0.0, -1.0), ("a c", -0.5, -0.2), ("d", -2.0, 0.0))
    sw = F.SystemWeights(lm_weight=0.7, length_weight=0.1)
    single = F.build_cn([lst], F.CombinationWeights(weights=(1.0,)), [sw])
    triple = F.build_cn([lst, lst, lst],
                        F.CombinationWeights(weights=(1 / 3, 1 / 3, 1 / 3)),
                        [sw, sw, sw])
    assert F.decode_cn(single) == F.decode_cn(triple)
    assert len(single.slots) == len(triple.slots)
    for s1, s2 in zip(single.slots, triple.slots):
        assert set(s1) == set(s2)
        for w in s1:
            assert s1[w] == pytest.approx(s2[w], abs=1e-9)


def test_decode_cn_matches_exhaustive_slot_choice_minimum():
    # expected word error of a slot-wise choice, under the CN's slot
    # posteriors: sum over slots of (1 - mass of the chosen token).  decode_cn
    # must attain the exhaustive minimum, ties lexicographic with epsilon last.
    rng = np.random.default_rng(2)
    vocab = ["a", "b", "c", "d"]
    for _ in range(120):
        hyps = []
        for _h in range(int(rng.integers(1, 4))):  # <= 3 hypotheses
            L = int(rng.integers(0, 5))  # <= 4 words
            w = " ".join(vocab[int(i)] for i in rng.integers(0, 4, L))
            hyps.append((w, float(rng.normal()), float(rng.normal())))
        lst = nb("u", *hyps)
        cn = F.build_cn([lst], F.CombinationWeights(weights=(1.0,)), uniform_sw(1))
        if not cn.slots:
            assert F.decode_cn(cn) == ()
            continue

        def cost(choice):
            return sum(1.0 - cn.slots[i][t] for i, t in enumerate(choice))

        best_cost = min(cost(c) for c in itertools.product(*[sorted(s) for s in cn.slots]))
        expected = []
        for slot in cn.slots:
            m = max(slot.values())
            cands = sorted((t for t, v in slot.items() if v == m),
                           key=lambda t: (t == F.EPSILON, t))
            if cands[0] != F.EPSILON:
                expected.append(cands[0])
        got = F.decode_cn(cn)
        assert got == tuple(expected)
        got_cost = sum(1.0 - max(s.values()) for s in cn.slots)
        assert got_cost == pytest.approx(best_cost, abs=1e-12)


def test_combination_weights_validation():
    with pytest.raises(ValueError):
        F.CombinationWeights(weights=(0.6, 0.6))
    with pytest.raises(ValueError):
        F.CombinationWeights(weights=(-0.5, 1.5))


# ---------------------------------------------------------------------------
# combination weight optimization and full fusion


def two_complementary_systems():
    # system A is right on even utterances, B on odd; each is confident when
    # right and low-posterior when wrong, so fusion beats both
    refs = [("a", "b"), ("c", "d"), ("e", "f"), ("g", "h")]
    sys_a, sys_b = [], []
    for i, ref in enumerate(refs):
        right = " ".join(ref)
        wrong = " ".join(w.upper() for w in ref)
        if i % 2 == 0:
            sys_a.append(nb(f"u{i}", (right, 0.0, 0.0), (wrong, -5.0, 0.0)))
            sys_b.append(nb(f"u{i}", (wrong, -0.1, 0.0), (right, -0.2, 0.0)))
        else:
            sys_a.append(nb(f"u{i}", (wrong, -0.1, 0.0), (right, -0.2, 0.0)))
            sys_b.append(nb(f"u{i}", (right, 0.0, 0.0), (wrong, -5.0, 0.0)))
    return [sys_a, sys_b], refs


def test_optimized_fusion_not_worse_than_single_systems():
    systems, refs = two_complementary_systems()
    sws = [F.SystemWeights(posterior_scale=2.0), F.SystemWeights(posterior_scale=2.0)]
    cw = F.optimize_combination_weights(systems, refs, sws)
    fused = F.fuse(systems, cw, sws)
    fused_wer = wer([list(r) for r in refs], [list(h) for h in fused])
    single = []
    for s in systems:
        hyps = [list(x.hypotheses[0].words) for x in s]
        single.append(wer([list(r) for r in refs], hyps))
    assert fused_wer <= min(single)
    assert fused_wer == 0.0


def test_optimize_combination_weights_matches_sweep():
    systems, refs = two_complementary_systems()
    sws = uniform_sw(2)
    cw = F.optimize_combination_weights(systems, refs, sws)
    got = F._ref_posterior_objective(systems, refs, sws, cw.weights)
    sweep_best = max(
        F._ref_posterior_objective(systems, refs, sws, (w, 1.0 - w))
        for w in np.arange(0.0, 1.0 + 1e-9, 0.1)
    )
    assert got >= sweep_best - 1e-9


def test_optimize_combination_weights_identical_systems():
    lst = [nb(f"u{i}", ("a b", 0.0, 0.0), ("a c", -1.0, 0.0)) for i in range(3)]
    refs = [("a", "b")] * 3
    sws = uniform_sw(2)
    cw = F.optimize_combination_weights([lst, lst], refs, sws)
    obj = F._ref_posterior_objective([lst, lst], refs, sws, cw.weights)
    uniform = F._ref_posterior_objective([lst, lst], refs, sws, (0.5, 0.5))
    assert obj == pytest.approx(uniform, abs=1e-9)


def test_optimize_combination_weights_needs_two_systems():
    with pytest.raises(ValueError):
        F.optimize_combination_weights([[nb("u", ("a", 0, 0))]], [("a",)], uniform_sw(1))
