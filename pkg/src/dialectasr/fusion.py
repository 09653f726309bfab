"""N-best system fusion: per-system score-weight optimization on dev WER,
combination-weight optimization against reference-word posteriors, and
confusion-network word-error-minimization decoding.

The derivative-free optimizer is a standard Nelder-Mead simplex with
multi-start support (dev WER is piecewise constant, so a single start can
stall on a plateau).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nbest import Hypothesis, NBestList
from .score import align, wer

__all__ = [
    "EPSILON",
    "SystemWeights",
    "CombinationWeights",
    "ConfusionNetwork",
    "nelder_mead",
    "rescore",
    "optimize_system_weights",
    "posteriors",
    "build_cn",
    "decode_cn",
    "optimize_combination_weights",
    "fuse",
]

EPSILON = "<eps>"


@dataclass(frozen=True)
class SystemWeights:
    lm_weight: float = 1.0
    length_weight: float = 0.0
    posterior_scale: float = 1.0

    def __post_init__(self):
        if not self.posterior_scale > 0:
            raise ValueError("posterior_scale must be positive")


@dataclass(frozen=True)
class CombinationWeights:
    weights: tuple[float, ...]

    def __post_init__(self):
        if any(w < 0 for w in self.weights):
            raise ValueError("negative combination weight")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("combination weights must sum to 1")


@dataclass
class ConfusionNetwork:
    # each slot maps word (or EPSILON) to posterior mass summing to 1
    slots: list[dict[str, float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Nelder-Mead simplex ("Amoeba") search


@dataclass(frozen=True)
class SimplexResult:
    x: np.ndarray
    fx: float
    iterations: int


def _simplex_run(f, x0, step, tol, max_iter):
    n = len(x0)
    verts = [np.asarray(x0, dtype=float)]
    for i in range(n):
        v = verts[0].copy()
        v[i] += step
        verts.append(v)
    vals = [f(v) for v in verts]
    if not all(np.isfinite(vals)):
        raise ValueError("non-finite objective at a starting simplex vertex")
    it = 0
    while it < max_iter:
        order = np.argsort(vals, kind="stable")
        verts = [verts[i] for i in order]
        vals = [vals[i] for i in order]
        diam = max(np.linalg.norm(v - verts[0]) for v in verts[1:])
        if diam < tol:
            break
        it += 1
        centroid = np.mean(verts[:-1], axis=0)
        worst = verts[-1]
        xr = centroid + 1.0 * (centroid - worst)
        fr = f(xr)
        if fr < vals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = f(xe)
            if fe < fr:
                verts[-1], vals[-1] = xe, fe
            else:
                verts[-1], vals[-1] = xr, fr
        elif fr < vals[-2]:
            verts[-1], vals[-1] = xr, fr
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = f(xc)
            if fc < vals[-1]:
                verts[-1], vals[-1] = xc, fc
            else:
                for i in range(1, n + 1):
                    verts[i] = verts[0] + 0.5 * (verts[i] - verts[0])
                    vals[i] = f(verts[i])
    best = int(np.argmin(vals))
    return verts[best], vals[best], it


def nelder_mead(
    objective,
    x0,
    step: float = 0.5,
    tol: float = 1e-6,
    max_iter: int = 500,
    starts=None,
) -> SimplexResult:
    """Minimize with reflection/expansion/contraction/shrink (1, 2, 0.5, 0.5).

    starts: optional extra starting points (multi-start grid); the result is
    the best over all runs and is never worse than the best starting point.
    """
    all_starts = [np.asarray(x0, dtype=float)]
    if starts is not None:
        all_starts += [np.asarray(s, dtype=float) for s in starts]
    f0 = objective(all_starts[0])
    if not np.isfinite(f0):
        raise ValueError("non-finite objective at the starting point")
    best_x, best_f, total_it = all_starts[0], f0, 0
    for s in all_starts:
        fs = objective(s)
        if fs < best_f:
            best_x, best_f = s, fs
        x, fx, it = _simplex_run(objective, s, step, tol, max_iter)
        total_it += it
        if fx < best_f:
            best_x, best_f = x, fx
    return SimplexResult(x=np.asarray(best_x), fx=float(best_f), iterations=total_it)


# ---------------------------------------------------------------------------
# Per-system rescoring


def combined_score(h: Hypothesis, w: SystemWeights) -> float:
    return h.am_score + w.lm_weight * h.lm_score + w.length_weight * h.word_count


def rescore(nbest: NBestList, w: SystemWeights) -> NBestList:
    """Stable sort by am + w_lm*lm + w_len*word_count, ties lexicographic."""
    ranked = sorted(
        nbest.hypotheses,
        key=lambda h: (-combined_score(h, w), h.words),
    )
    return NBestList(utterance_id=nbest.utterance_id, hypotheses=tuple(ranked))


def _dev_wer(nbests, references, w: SystemWeights) -> float:
    hyps = [list(rescore(nb, w).hypotheses[0].words) for nb in nbests]
    return wer([list(r) for r in references], hyps)


def system_weight_grid(n: int = 5, lo: float = 0.0, hi: float = 4.0):
    pts = np.linspace(lo, hi, n)
    return [np.array([a, b]) for a in pts for b in pts]


def optimize_system_weights(dev_nbests, references) -> SystemWeights:
    """Minimize dev WER of the rescored 1-best over (lm, length) weights.

    Multi-start Nelder-Mead from a 5x5 grid over [0,4]^2 plus the default
    (1, 0); posterior scale is set to 1/lm_weight with a floor of 1.
    """
    if not dev_nbests:
        raise ValueError("empty dev set")
    if len(dev_nbests) != len(references):
        raise ValueError("dev nbests and references differ in length")

    def objective(x):
        return _dev_wer(dev_nbests, references, SystemWeights(x[0], x[1]))

    res = nelder_mead(objective, np.array([1.0, 0.0]), step=0.5,
                      starts=system_weight_grid())
    w_lm, w_len = float(res.x[0]), float(res.x[1])
    kappa = max(1.0, 1.0 / w_lm) if w_lm > 0 else 1.0
    return SystemWeights(lm_weight=w_lm, length_weight=w_len, posterior_scale=kappa)


def posteriors(nbest: NBestList, w: SystemWeights) -> np.ndarray:
    """Softmax over hypotheses of the scaled combined score."""
    s = np.array([combined_score(h, w) for h in nbest.hypotheses])
    s = w.posterior_scale * s
    s -= s.max()
    e = np.exp(s)
    return e / e.sum()


# ---------------------------------------------------------------------------
# Confusion networks (ROVER generalization)


def build_cn(nbests, cw: CombinationWeights, system_weights) -> ConfusionNetwork:
    """Merge one utterance's N-best lists from all systems into a CN.

    Hypotheses are pooled with mass cw_s * p_i, sorted by mass (greedy pivot
    alignment), and aligned slot-wise by minimum edit distance; each slot's
    epsilon takes the mass deficit so slots sum to 1.
    """
    if not nbests:
        raise ValueError("need at least one system")
    if len(nbests) != len(cw.weights) or len(nbests) != len(system_weights):
        raise ValueError("systems, weights, and system_weights must align")
    pooled: list[tuple[tuple[str, ...], float]] = []
    for nb, weight, sw in zip(nbests, cw.weights, system_weights):
        ps = posteriors(nb, sw)
        for h, p in zip(nb.hypotheses, ps):
            pooled.append((h.words, weight * float(p)))
    pooled.sort(key=lambda x: (-x[1], x[0]))

    cn = ConfusionNetwork()
    for words, mass in pooled:
        _cn_add(cn, words, mass)
    for slot in cn.slots:
        total = sum(m for w2, m in slot.items() if w2 != EPSILON)
        slot[EPSILON] = max(0.0, 1.0 - total)
    return cn


def _cn_add(cn: ConfusionNetwork, words, mass: float) -> None:
    if not cn.slots:
        for w in words:
            cn.slots.append({w: mass})
        return
    reps = [_slot_rep(s) for s in cn.slots]
    alignment = align(reps, list(words))
    new_slots: list[dict[str, float]] = []
    si = 0
    for op in alignment.ops:
        if op.kind in ("match", "substitute"):
            slot = cn.slots[si]
            slot[op.hyp] = slot.get(op.hyp, 0.0) + mass
            new_slots.append(slot)
            si += 1
        elif op.kind == "delete":
            new_slots.append(cn.slots[si])
            si += 1
        else:  # insert: a fresh slot carrying only this hypothesis's word
            new_slots.append({op.hyp: mass})
    cn.slots = new_slots


def _slot_rep(slot: dict[str, float]) -> str:
    """Highest-mass real word of a slot (for alignment only)."""
    best = None
    for w, m in sorted(slot.items()):
        if w == EPSILON:
            continue
        if best is None or m > best[1]:
            best = (w, m)
    return best[0] if best else EPSILON


def decode_cn(cn: ConfusionNetwork) -> tuple[str, ...]:
    """Per-slot argmax; epsilon emits nothing, ties go to the lexicographically
    first word with epsilon last."""
    out = []
    for slot in cn.slots:
        best = min(slot.items(), key=lambda kv: (-kv[1], kv[0] == EPSILON, kv[0]))
        if best[0] != EPSILON:
            out.append(best[0])
    return tuple(out)


# ---------------------------------------------------------------------------
# Combination weights


def _ref_posterior_objective(per_system_nbests, references, system_weights, weights):
    """Total posterior mass assigned to reference words at their aligned
    slots, summed over dev utterances."""
    cw = CombinationWeights(weights=tuple(weights))
    total = 0.0
    for utt_i, ref in enumerate(references):
        nbests = [sys_nb[utt_i] for sys_nb in per_system_nbests]
        cn = build_cn(nbests, cw, system_weights)
        reps = [_slot_rep(s) for s in cn.slots]
        alignment = align(reps, list(ref))
        si = 0
        for op in alignment.ops:
            if op.kind in ("match", "substitute"):
                total += cn.slots[si].get(op.hyp, 0.0)
                si += 1
            elif op.kind == "delete":
                si += 1
    return total


def optimize_combination_weights(per_system_nbests, references, system_weights) -> CombinationWeights:
    """Maximize reference-word posterior mass over softmax-parameterized
    system weights, uniform start."""
    n = len(per_system_nbests)
    if n < 2:
        raise ValueError("need at least 2 systems")

    def softmax(z):
        e = np.exp(z - np.max(z))
        return e / e.sum()

    def objective(z):
        return -_ref_posterior_objective(per_system_nbests, references,
                                         system_weights, softmax(z))

    starts = [np.zeros(n)]
    for i in range(n):
        z = np.zeros(n)
        z[i] = 2.0
        starts.append(z)
    res = nelder_mead(objective, starts[0], step=0.5, starts=starts[1:])
    w = softmax(res.x)
    w = w / w.sum()
    return CombinationWeights(weights=tuple(float(x) for x in w))


def fuse(per_system_nbests, cw: CombinationWeights, system_weights):
    """Decode every utterance's merged confusion network."""
    out = []
    n_utts = len(per_system_nbests[0])
    for utt_i in range(n_utts):
        nbests = [sys_nb[utt_i] for sys_nb in per_system_nbests]
        cn = build_cn(nbests, cw, system_weights)
        out.append(decode_cn(cn))
    return out
