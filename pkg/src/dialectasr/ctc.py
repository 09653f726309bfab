"""CTC primitives: loss, greedy decoding, prefix beam search with word-level
LM shallow fusion, and forced alignment.

All probability arithmetic is carried out in natural-log space; ARPA log10
values are converted at the fusion boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import WordSpan
from .nbest import Hypothesis, NBestList

__all__ = [
    "CharVocab",
    "AlignmentResult",
    "NoPathError",
    "ctc_loss",
    "greedy_decode",
    "beam_search",
    "force_align",
]

LN10 = math.log(10.0)
NEG_INF = float("-inf")


class NoPathError(ValueError):
    pass


@dataclass(frozen=True)
class CharVocab:
    """Character inventory: blank at index 0, word separator (space) present."""

    characters: tuple[str, ...]
    blank: str = "<b>"
    separator: str = " "

    @staticmethod
    def from_charset(charset) -> "CharVocab":
        chars = sorted(set(charset) - {" "})
        return CharVocab(characters=("<b>", " ") + tuple(chars))

    def __post_init__(self):
        if self.characters[0] != self.blank:
            raise ValueError("blank must sit at index 0")
        if self.separator not in self.characters:
            raise ValueError("separator missing from vocabulary")

    def __len__(self) -> int:
        return len(self.characters)

    @property
    def separator_id(self) -> int:
        return self.characters.index(self.separator)

    def index(self, char: str) -> int:
        if char == self.blank:
            raise ValueError("blank may not appear in transcripts")
        return self.characters.index(char)

    def encode(self, words) -> list[int]:
        """Transcript words to label ids, separator-joined."""
        sep = self.separator_id
        ids: list[int] = []
        for wi, w in enumerate(words):
            if wi:
                ids.append(sep)
            for c in w:
                ids.append(self.index(c))
        return ids

    def decode_ids(self, ids) -> tuple[str, ...]:
        text = "".join(self.characters[i] for i in ids)
        return tuple(text.split())


@dataclass(frozen=True)
class AlignmentResult:
    char_spans: tuple[tuple[int, int, int], ...]  # (label id, start frame, end frame)
    word_spans: tuple[WordSpan, ...]
    log_prob: float


def _expand_labels(labels) -> list[int]:
    out = [0]
    for l in labels:
        out.append(l)
        out.append(0)
    return out


def ctc_loss(log_probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """CTC negative log-likelihood and its gradient w.r.t. the log-prob matrix.

    log_probs: (T, V) row-normalized natural-log probabilities; labels: ids
    without blanks.  Returns (+inf, zeros) when no valid path exists.
    """
    y = np.asarray(log_probs, dtype=np.float64)
    T, V = y.shape
    labels = list(labels)
    if any(l == 0 for l in labels):
        raise ValueError("label contains the blank symbol")
    ext = _expand_labels(labels)
    S = len(ext)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = y[0, ext[0]]
    if S > 1:
        alpha[0, 1] = y[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        for s in range(S):
            a = prev[s]
            if s >= 1:
                a = np.logaddexp(a, prev[s - 1])
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                a = np.logaddexp(a, prev[s - 2])
            alpha[t, s] = a + y[t, ext[s]]

    log_p = alpha[T - 1, S - 1]
    if S > 1:
        log_p = np.logaddexp(log_p, alpha[T - 1, S - 2])
    if not np.isfinite(log_p):
        return float("inf"), np.zeros_like(y)

    # beta excludes the frame-t emission so alpha*beta sums to P at every t
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        for s in range(S):
            b = nxt[s] + y[t + 1, ext[s]]
            if s + 1 < S:
                b = np.logaddexp(b, nxt[s + 1] + y[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != 0 and ext[s + 2] != ext[s]:
                b = np.logaddexp(b, nxt[s + 2] + y[t + 1, ext[s + 2]])
            beta[t, s] = b

    grad = np.zeros_like(y)
    occ = alpha + beta - log_p  # log occupancy per state
    for t in range(T):
        acc: dict[int, float] = {}
        for s in range(S):
            k = ext[s]
            v = occ[t, s]
            if v == NEG_INF:
                continue
            acc[k] = np.logaddexp(acc[k], v) if k in acc else v
        for k, v in acc.items():
            grad[t, k] = -math.exp(v)
    return float(-log_p), grad


def greedy_decode(log_probs: np.ndarray, vocab: CharVocab) -> tuple[str, ...]:
    """Best-path decoding: per-frame argmax, collapse repeats, drop blanks."""
    best = np.argmax(np.asarray(log_probs), axis=1)
    ids = []
    prev = -1
    for k in best:
        if k != prev and k != 0:
            ids.append(int(k))
        prev = k
    return vocab.decode_ids(ids)


# ---------------------------------------------------------------------------
# Prefix beam search with shallow fusion


class _LmFusion:
    """Incremental word-level LM scoring for character prefixes."""

    def __init__(self, model):
        self.model = model
        self.initial_context = ("<s>",)

    def word_logp(self, context, word):
        logp10, token = self.model.score_token(context, word)
        order = self.model.order
        new_ctx = (context + (token,))[-(order - 1):] if order > 1 else ()
        return logp10 * LN10, new_ctx

    def end_logp(self, context):
        logp10, _ = self.model.score_token(context, "</s>")
        return logp10 * LN10


@dataclass
class _Beam:
    p_b: float = NEG_INF
    p_nb: float = NEG_INF
    lm_raw: float = 0.0       # accumulated ln P of completed words
    word_count: int = 0
    lm_ctx: tuple = ("<s>",)

    @property
    def total(self) -> float:
        return np.logaddexp(self.p_b, self.p_nb)


def _trailing_word(prefix, vocab: CharVocab) -> str:
    sep = vocab.separator_id
    word = []
    for cid in reversed(prefix):
        if cid == sep:
            break
        word.append(vocab.characters[cid])
    return "".join(reversed(word))


def beam_search(
    log_probs: np.ndarray,
    vocab: CharVocab,
    lm=None,
    beam_width: int = 16,
    alpha: float = 0.5,
    beta: float = 0.0,
    n_best: int | None = None,
) -> NBestList:
    """Character prefix beam search; returns up to beam_width hypotheses.

    LM scores are added whenever a word boundary is emitted (separator or end
    of utterance, plus a final sentence-end score); hypotheses are ranked by
    am + alpha*lm + beta*word_count.
    """
    y = np.asarray(log_probs, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty logits")
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    T, V = y.shape
    sep = vocab.separator_id
    fusion = _LmFusion(lm) if lm is not None else None

    beams: dict[tuple, _Beam] = {(): _Beam(p_b=0.0, p_nb=NEG_INF)}

    for t in range(T):
        new: dict[tuple, _Beam] = {}

        def get(prefix, src):
            b = new.get(prefix)
            if b is None:
                b = _Beam(lm_raw=src.lm_raw, word_count=src.word_count, lm_ctx=src.lm_ctx)
                new[prefix] = b
            return b

        for prefix, b in beams.items():
            last = prefix[-1] if prefix else None
            # blank keeps the prefix
            nb = get(prefix, b)
            nb.p_b = np.logaddexp(nb.p_b, b.total + y[t, 0])
            for c in range(1, V):
                p = y[t, c]
                if c == last:
                    # same char without blank extends the run, not the label
                    nb2 = get(prefix, b)
                    nb2.p_nb = np.logaddexp(nb2.p_nb, b.p_nb + p)
                    ext = prefix + (c,)
                    nbe = _extend(new, ext, prefix, b, vocab, fusion)
                    nbe.p_nb = np.logaddexp(nbe.p_nb, b.p_b + p)
                else:
                    ext = prefix + (c,)
                    nbe = _extend(new, ext, prefix, b, vocab, fusion)
                    nbe.p_nb = np.logaddexp(nbe.p_nb, b.total + p)

        scored = sorted(
            new.items(),
            key=lambda kv: (-_running_score(kv[1], alpha, beta), kv[0]),
        )
        beams = dict(scored[:beam_width])

    finals = []
    for prefix, b in beams.items():
        lm_final = b.lm_raw
        wc = b.word_count
        if fusion is not None:
            ctx = b.lm_ctx
            tail = _trailing_word(prefix, vocab)
            if tail:
                lp, ctx = fusion.word_logp(ctx, tail)
                lm_final += lp
                wc += 1
            lm_final += fusion.end_logp(ctx)
        else:
            if _trailing_word(prefix, vocab):
                wc += 1
        am = b.total
        combined = am + alpha * lm_final + beta * wc
        finals.append((combined, prefix, am, lm_final))
    finals.sort(key=lambda x: (-x[0], x[1]))

    limit = n_best if n_best is not None else beam_width
    hyps = [
        Hypothesis(words=vocab.decode_ids(prefix), am_score=am, lm_score=lm_final)
        for _, prefix, am, lm_final in finals[:limit]
    ]
    return NBestList(utterance_id="", hypotheses=tuple(hyps))


def _extend(new, ext, prefix, src, vocab, fusion):
    b = new.get(ext)
    if b is not None:
        return b
    b = _Beam(lm_raw=src.lm_raw, word_count=src.word_count, lm_ctx=src.lm_ctx)
    if ext[-1] == vocab.separator_id:
        word = _trailing_word(prefix, vocab)
        if word:
            b.word_count = src.word_count + 1
            if fusion is not None:
                lp, ctx = fusion.word_logp(src.lm_ctx, word)
                b.lm_raw = src.lm_raw + lp
                b.lm_ctx = ctx
    new[ext] = b
    return b


def _running_score(b: _Beam, alpha: float, beta: float) -> float:
    return b.total + alpha * b.lm_raw + beta * b.word_count


# ---------------------------------------------------------------------------
# Forced alignment (CTC segmentation)


def force_align(log_probs: np.ndarray, vocab: CharVocab, transcript) -> AlignmentResult:
    """Viterbi alignment of a known transcript against frame log-probs.

    Word spans tile [0, T): blanks and separator frames attach to the
    preceding word's end; leading silence attaches to the first word.
    """
    y = np.asarray(log_probs, dtype=np.float64)
    T, V = y.shape
    labels = vocab.encode(transcript)
    ext = _expand_labels(labels)
    S = len(ext)

    delta = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.int32)
    delta[0, 0] = y[0, ext[0]]
    if S > 1:
        delta[0, 1] = y[0, ext[1]]
    for t in range(1, T):
        prev = delta[t - 1]
        for s in range(S):
            best, arg = prev[s], s
            if s >= 1 and prev[s - 1] > best:
                best, arg = prev[s - 1], s - 1
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2] and prev[s - 2] > best:
                best, arg = prev[s - 2], s - 2
            delta[t, s] = best + y[t, ext[s]]
            back[t, s] = arg

    end_states = [S - 1] + ([S - 2] if S > 1 else [])
    end = max(end_states, key=lambda s: delta[T - 1, s])
    if not np.isfinite(delta[T - 1, end]):
        raise NoPathError(f"no valid alignment path ({T} frames for {S} states)")

    path = np.zeros(T, dtype=np.int32)
    path[T - 1] = end
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]

    # contiguous frame span per occupied non-blank state
    char_spans = []
    state_start: dict[int, int] = {}
    for t in range(T):
        s = int(path[t])
        if ext[s] != 0 and s not in state_start:
            state_start[s] = t
    for s, start in sorted(state_start.items()):
        t = start
        while t < T and path[t] == s:
            t += 1
        char_spans.append((ext[s], start, t))

    # first character state of each word (separators delimit words)
    word_first_state = []
    in_word = False
    for i, l in enumerate(labels):
        s = 2 * i + 1  # state index of label i in the expanded sequence
        if l == vocab.separator_id:
            in_word = False
        elif not in_word:
            word_first_state.append(s)
            in_word = True
    starts = [state_start[s] for s in word_first_state]
    spans = []
    for wi in range(len(starts)):
        start = 0 if wi == 0 else starts[wi]
        stop = starts[wi + 1] if wi + 1 < len(starts) else T
        spans.append(WordSpan(word_index=wi, start_frame=start, end_frame=stop))

    return AlignmentResult(
        char_spans=tuple(char_spans),
        word_spans=tuple(spans),
        log_prob=float(delta[T - 1, end]),
    )
