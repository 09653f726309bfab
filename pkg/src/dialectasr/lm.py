"""Kneser-Ney back-off n-gram language models.

Training uses interpolated modified Kneser-Ney with three discounts per
order.  Probabilities and back-off weights are stored in log10 (ARPA
convention); back-off weights are computed by exact normalization so every
context distribution sums to one.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BOS",
    "EOS",
    "UNK",
    "Vocabulary",
    "NGramModel",
    "MixtureWeights",
    "train_kn",
    "perplexity",
    "oov_rate",
    "interpolate",
    "sample_sentences",
    "arpa_write",
    "arpa_read",
    "ArpaError",
]

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
RESERVED = (BOS, EOS, UNK)

LOG10_ZERO = -99.0


class ArpaError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]  # includes reserved tokens

    @staticmethod
    def from_words(words) -> "Vocabulary":
        regular = sorted(set(words) - set(RESERVED))
        return Vocabulary(words=tuple(RESERVED) + tuple(regular))

    def __contains__(self, w) -> bool:
        return w in self._index

    def __len__(self) -> int:
        return len(self.words)

    @property
    def _index(self):
        d = self.__dict__.get("_index_cache")
        if d is None:
            d = {w: i for i, w in enumerate(self.words)}
            self.__dict__["_index_cache"] = d
        return d

    @property
    def regular_words(self) -> tuple[str, ...]:
        return tuple(w for w in self.words if w not in RESERVED)


@dataclass
class NGramModel:
    order: int
    # probs[k] maps (k+1)-tuples of tokens to log10 probability
    probs: list[dict[tuple, float]]
    # back-off weights (log10) keyed by context tuple, any length >= 1
    bows: dict[tuple, float]
    vocabulary: Vocabulary
    warnings: list[str] = field(default_factory=list)

    @property
    def predicted_tokens(self) -> tuple[str, ...]:
        """Every token the model can emit: vocabulary minus <s>."""
        return tuple(w for w in self.vocabulary.words if w != BOS)

    def map_token(self, word: str) -> str:
        if word == BOS or word not in self.vocabulary:
            return UNK
        return word

    def logprob(self, context, word: str) -> float:
        """log10 P(word | context), following back-off. word must be a token."""
        ctx = tuple(context)
        if self.order > 1:
            ctx = ctx[-(self.order - 1):]
        else:
            ctx = ()
        return self._lp(ctx, word)

    def _lp(self, ctx, w) -> float:
        key = ctx + (w,)
        entry = self.probs[len(key) - 1].get(key) if len(key) <= self.order else None
        if entry is not None:
            return entry
        if not ctx:
            uni = self.probs[0].get((w,))
            if uni is not None:
                return uni
            return self.probs[0][(UNK,)]
        return self.bows.get(ctx, 0.0) + self._lp(ctx[1:], w)

    def score_token(self, context, word: str) -> tuple[float, str]:
        """Map an arbitrary word through <unk> and score it.

        Returns (log10 prob, token used) so the caller can advance its
        context with the mapped token.
        """
        token = self.map_token(word) if word != EOS else EOS
        return self._lp(self._ctx(context), token), token

    def _ctx(self, context):
        if self.order <= 1:
            return ()
        return tuple(self.map_token(w) if w != BOS else BOS for w in context)[-(self.order - 1):]

    def context_sum(self, context) -> float:
        """Sum of P(w|context) over every predicted token (for diagnostics)."""
        ctx = self._ctx(context)
        return sum(10.0 ** self._lp(ctx, w) for w in self.predicted_tokens)


@dataclass(frozen=True)
class MixtureWeights:
    weights: tuple[float, ...]

    def __post_init__(self):
        if any(w < 0 for w in self.weights):
            raise ValueError("negative mixture weight")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {sum(self.weights)}, not 1")


def _as_token_lists(sentences):
    out = []
    for s in sentences:
        if isinstance(s, str):
            words = s.split()
        else:
            words = list(s)
        if words:
            out.append(words)
    return out


# ---------------------------------------------------------------------------
# Training


def _discounts(counts: Counter, warnings: list[str], label: str):
    """Modified KN discounts D1, D2, D3+ from count-of-counts."""
    cc = Counter(counts.values())
    n1, n2, n3, n4 = cc.get(1, 0), cc.get(2, 0), cc.get(3, 0), cc.get(4, 0)
    if n1 == 0 or n2 == 0:
        warnings.append(f"{label}: degenerate count-of-counts (n1={n1}, n2={n2}); "
                        f"falling back to absolute discount 0.5")
        return (0.5, 0.5, 0.5)
    y = n1 / (n1 + 2.0 * n2)
    d1 = 1.0 - 2.0 * y * n2 / n1
    d2 = 2.0 - 3.0 * y * n3 / n2 if n2 else 0.5
    d3 = 3.0 - 4.0 * y * n4 / n3 if n3 else 0.5
    ds = [d1, d2, d3]
    if any(not (0.0 <= d) for d in ds) or any(not np.isfinite(d) for d in ds):
        warnings.append(f"{label}: discount formula out of range {ds}; "
                        f"falling back to absolute discount 0.5")
        return (0.5, 0.5, 0.5)
    return tuple(min(d, c) for d, c in zip(ds, (1.0, 2.0, 3.0)))


def _d_for(ds, c: int) -> float:
    if c >= 3:
        return ds[2]
    if c == 2:
        return ds[1]
    if c == 1:
        return ds[0]
    return 0.0


def train_kn(sentences, order: int = 4, min_count: int = 1) -> NGramModel:
    """Train an interpolated modified-KN model.

    Lower-order counts are continuation (left-extension type) counts, except
    for n-grams starting with <s>, which keep raw counts.  With min_count=1
    every observed n-gram gets an explicit entry.
    """
    sents = _as_token_lists(sentences)
    if not sents:
        raise ValueError("need at least one non-empty sentence")
    vocab = Vocabulary.from_words(w for s in sents for w in s)

    raw: list[Counter] = [Counter() for _ in range(order)]
    for s in sents:
        padded = [BOS] + s + [EOS]
        for k in range(1, order + 1):
            for i in range(len(padded) - k + 1):
                g = tuple(padded[i:i + k])
                if g[-1] == BOS:
                    continue  # nothing predicts <s>
                raw[k - 1][g] += 1

    # adjusted counts: continuation counts below the top order
    adj: list[Counter] = [Counter() for _ in range(order)]
    adj[order - 1] = raw[order - 1]
    for k in range(order - 1, 0, -1):
        cont = Counter()
        for g in raw[k]:  # (k+1)-grams
            cont[g[1:]] += 1
        a = Counter()
        for g, c in raw[k - 1].items():
            if g[0] == BOS:
                a[g] = c  # no left extension exists
            else:
                a[g] = cont.get(g, c)
        adj[k - 1] = a

    warnings: list[str] = []
    model = NGramModel(
        order=order,
        probs=[dict() for _ in range(order)],
        bows={},
        vocabulary=vocab,
        warnings=warnings,
    )

    predicted = [w for w in vocab.words if w != BOS]
    n_pred = len(predicted)

    # unigrams
    ds1 = _discounts(adj[0], warnings, "order 1")
    uni = {g: c for g, c in adj[0].items() if g[0] != BOS}
    total = sum(uni.values())
    leftover = sum(_d_for(ds1, c) for c in uni.values()) / total
    for w in predicted:
        c = uni.get((w,), 0)
        p = max(c - _d_for(ds1, c), 0.0) / total + leftover / n_pred
        model.probs[0][(w,)] = math.log10(p)
    model.probs[0][(BOS,)] = LOG10_ZERO

    # higher orders
    for k in range(2, order + 1):
        counts = {g: c for g, c in adj[k - 1].items() if c >= (min_count if k > 1 else 1)}
        if not counts:
            continue
        ds = _discounts(counts, warnings, f"order {k}")
        ctx_total: dict[tuple, int] = defaultdict(int)
        ctx_nj: dict[tuple, list[int]] = defaultdict(lambda: [0, 0, 0])
        for g, c in counts.items():
            h = g[:-1]
            ctx_total[h] += c
            ctx_nj[h][min(c, 3) - 1] += 1
        by_ctx: dict[tuple, list] = defaultdict(list)
        for g, c in counts.items():
            h = g[:-1]
            by_ctx[h].append(g)
            denom = ctx_total[h]
            nj = ctx_nj[h]
            gamma = (ds[0] * nj[0] + ds[1] * nj[1] + ds[2] * nj[2]) / denom
            p = max(c - _d_for(ds, c), 0.0) / denom + gamma * 10.0 ** model._lp(h[1:], g[-1])
            model.probs[k - 1][g] = math.log10(p)
        # back-off weights for the new contexts, by exact normalization
        for h, grams in by_ctx.items():
            _set_bow(model, h, grams)

    return model


def _set_bow(model: NGramModel, h: tuple, explicit) -> None:
    k = len(h)
    num = 1.0 - sum(10.0 ** model.probs[k][g] for g in explicit)
    den = 1.0 - sum(10.0 ** model._lp(h[1:], g[-1]) for g in explicit)
    if num <= 1e-13:
        model.bows[h] = LOG10_ZERO  # explicit entries already carry all mass
    elif den <= 1e-13:
        model.bows[h] = 0.0
    else:
        model.bows[h] = math.log10(num / den)


def _recompute_bows(model: NGramModel) -> None:
    """Recompute every back-off weight bottom-up by normalization."""
    model.bows = {}
    for k in range(1, model.order):
        contexts = {g[:-1] for g in model.probs[k]}
        by_ctx: dict[tuple, list] = defaultdict(list)
        for g in model.probs[k]:
            by_ctx[g[:-1]].append(g)
        for h in sorted(contexts):
            _set_bow(model, h, by_ctx[h])


# ---------------------------------------------------------------------------
# Evaluation


def perplexity(model: NGramModel, sentences) -> dict:
    """Perplexity with OOVs mapped to <unk>; the OOV-excluded value is also
    reported. PPL = 10^(-(sum log10 P)/N), N counting </s>."""
    sents = _as_token_lists(sentences)
    total = 0.0
    total_known = 0.0
    n_tokens = 0
    n_known = 0
    oov = 0
    for s in sents:
        ctx = (BOS,)
        for w in s + [EOS]:
            lp, token = model.score_token(ctx, w)
            is_oov = w != EOS and token == UNK
            oov += int(is_oov)
            total += lp
            n_tokens += 1
            if not is_oov:
                total_known += lp
                n_known += 1
            ctx = ctx + (token,)
    return {
        "ppl": 10.0 ** (-total / n_tokens) if n_tokens else float("nan"),
        "ppl_excluding_oov": 10.0 ** (-total_known / n_known) if n_known else float("nan"),
        "oov_count": oov,
        "token_count": n_tokens,
        "log10_prob": total,
    }


def oov_rate(vocab: Vocabulary, sentences) -> float:
    sents = _as_token_lists(sentences)
    tokens = [w for s in sents for w in s if w not in RESERVED]
    if not tokens:
        raise ValueError("empty test set")
    return sum(1 for w in tokens if w not in vocab) / len(tokens)


# ---------------------------------------------------------------------------
# Mixture interpolation


def interpolate(models, dev_sentences, tol: float = 1e-6, max_iter: int = 200):
    """EM-optimize static mixture weights on dev data, then materialize the
    merged back-off model over the union of contexts."""
    models = list(models)
    if len(models) < 2:
        raise ValueError("need at least 2 models")
    sents = _as_token_lists(dev_sentences)
    if not sents:
        raise ValueError("empty dev set")

    # per-token component probabilities
    probs = []
    for s in sents:
        ctxs = [(BOS,) for _ in models]
        for w in s + [EOS]:
            row = []
            for mi, m in enumerate(models):
                lp, token = m.score_token(ctxs[mi], w)
                row.append(10.0 ** lp)
                ctxs[mi] = ctxs[mi] + (token,)
            probs.append(row)
    P = np.asarray(probs)  # (n_tokens, n_models)

    lam = np.full(len(models), 1.0 / len(models))
    prev_ll = -np.inf
    for _ in range(max_iter):
        mix = P @ lam
        ll = float(np.sum(np.log(np.maximum(mix, 1e-300))))
        if ll < prev_ll - 1e-9:
            raise AssertionError("EM log-likelihood decreased")
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll
        resp = P * lam / np.maximum(mix[:, None], 1e-300)
        lam = resp.mean(axis=0)
        lam = lam / lam.sum()

    weights = MixtureWeights(weights=tuple(float(x) for x in lam))
    merged = _materialize_mixture(models, lam)
    return merged, weights


def _materialize_mixture(models, lam) -> NGramModel:
    order = max(m.order for m in models)
    vocab = Vocabulary.from_words(w for m in models for w in m.vocabulary.regular_words)
    merged = NGramModel(order=order, probs=[dict() for _ in range(order)],
                        bows={}, vocabulary=vocab)

    def mix_lp(ctx, w) -> float:
        p = 0.0
        for m, l in zip(models, lam):
            mctx = m._ctx(ctx)
            token = m.map_token(w) if w != EOS else EOS
            p += l * 10.0 ** m._lp(mctx, token)
        return p

    # unigrams: every union token, renormalized (per-model <unk> mass would
    # otherwise be counted once per OOV type)
    predicted = [w for w in vocab.words if w != BOS]
    uni = {w: mix_lp((), w) for w in predicted}
    z = sum(uni.values())
    for w, p in uni.items():
        merged.probs[0][(w,)] = math.log10(max(p / z, 1e-99))
    merged.probs[0][(BOS,)] = LOG10_ZERO

    for k in range(2, order + 1):
        keys = set()
        for m in models:
            if m.order >= k:
                keys.update(m.probs[k - 1].keys())
        by_ctx: dict[tuple, list] = defaultdict(list)
        for g in keys:
            by_ctx[g[:-1]].append(g)
        for h, grams in by_ctx.items():
            vals = {g: mix_lp(g[:-1], g[-1]) for g in grams}
            s = sum(vals.values())
            if s >= 1.0 - 1e-12:
                scale = (1.0 - 1e-9) / s
                vals = {g: v * scale for g, v in vals.items()}
            for g, v in vals.items():
                merged.probs[k - 1][g] = math.log10(max(v, 1e-99))
    _recompute_bows(merged)
    return merged


# ---------------------------------------------------------------------------
# Sampling


def sample_sentences(model: NGramModel, n: int, max_len: int, seed: int):
    """Ancestral sampling from <s>; sentences exclude boundary tokens and
    never contain <unk>."""
    rng = np.random.default_rng(seed)
    emit = [w for w in model.predicted_tokens if w != UNK]
    out = []
    for _ in range(n):
        ctx = (BOS,)
        words: list[str] = []
        while len(words) < max_len:
            ps = np.array([10.0 ** model._lp(model._ctx(ctx), w) for w in emit])
            ps = ps / ps.sum()
            choice = emit[int(rng.choice(len(emit), p=ps))]
            if choice == EOS:
                break
            words.append(choice)
            ctx = ctx + (choice,)
        out.append(tuple(words))
    return out


# ---------------------------------------------------------------------------
# ARPA persistence


def arpa_write(model: NGramModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\\data\\\n")
        for k in range(1, model.order + 1):
            f.write(f"ngram {k}={len(model.probs[k - 1])}\n")
        f.write("\n")
        for k in range(1, model.order + 1):
            f.write(f"\\{k}-grams:\n")
            for g in sorted(model.probs[k - 1]):
                lp = model.probs[k - 1][g]
                line = "%.7g\t%s" % (lp, " ".join(g))
                if k < model.order and g in model.bows:
                    line += "\t%.7g" % model.bows[g]
                f.write(line + "\n")
            f.write("\n")
        f.write("\\end\\\n")


def arpa_read(path) -> NGramModel:
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    it = iter(enumerate(lines, start=1))
    counts: dict[int, int] = {}
    for ln_no, ln in it:
        if ln.strip() == "\\data\\":
            break
    else:
        raise ArpaError(f"{path}: missing \\data\\ section")
    for ln_no, ln in it:
        s = ln.strip()
        if not s:
            break
        if not s.startswith("ngram "):
            raise ArpaError(f"{path}:{ln_no}: bad data line {s!r}")
        k, n = s[len("ngram "):].split("=")
        counts[int(k)] = int(n)
    order = max(counts) if counts else 0
    if order == 0:
        raise ArpaError(f"{path}: empty \\data\\ section")

    probs: list[dict[tuple, float]] = [dict() for _ in range(order)]
    bows: dict[tuple, float] = {}
    current = None
    for ln_no, ln in it:
        s = ln.strip()
        if not s:
            continue
        if s == "\\end\\":
            current = None
            break
        if s.endswith("-grams:") and s.startswith("\\"):
            current = int(s[1:s.index("-")])
            continue
        if current is None:
            raise ArpaError(f"{path}:{ln_no}: n-gram line outside a section")
        parts = ln.split("\t")
        if len(parts) == 2:
            lp, gram = parts
            bow = None
        elif len(parts) == 3:
            lp, gram, bow = parts
        else:
            raise ArpaError(f"{path}:{ln_no}: malformed n-gram line")
        g = tuple(gram.split())
        if len(g) != current:
            raise ArpaError(f"{path}:{ln_no}: {len(g)}-gram in \\{current}-grams: section")
        probs[current - 1][g] = float(lp)
        if bow is not None:
            bows[g] = float(bow)

    for k, n in counts.items():
        if len(probs[k - 1]) != n:
            raise ArpaError(
                f"{path}: header says {n} {k}-grams, body has {len(probs[k - 1])}"
            )
    words = [g[0] for g in probs[0]]
    vocab = Vocabulary.from_words(w for w in words if w not in RESERVED)
    return NGramModel(order=order, probs=probs, bows=bows, vocabulary=vocab)
