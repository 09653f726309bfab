"""N-best hypothesis lists and their text serialization.

Text format, per utterance:

    <utterance id>
    am_score<TAB>lm_score<TAB>word_count<TAB>word1 word2 ...
    ...
    <blank line>

Scores are natural-log values printed with 9 significant digits.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["Hypothesis", "NBestList", "read_nbest_file", "write_nbest_file"]


@dataclass(frozen=True)
class Hypothesis:
    words: tuple[str, ...]
    am_score: float
    lm_score: float

    @property
    def word_count(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class NBestList:
    utterance_id: str
    hypotheses: tuple[Hypothesis, ...]

    def __post_init__(self):
        if not self.hypotheses:
            raise ValueError(f"{self.utterance_id}: empty N-best list")


def write_nbest_file(nbests, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for nb in nbests:
            f.write(nb.utterance_id + "\n")
            for h in nb.hypotheses:
                f.write(
                    "%.9g\t%.9g\t%d\t%s\n" % (h.am_score, h.lm_score, h.word_count, " ".join(h.words))
                )
            f.write("\n")


def read_nbest_file(path) -> list[NBestList]:
    out = []
    with open(path, encoding="utf-8") as f:
        utt_id = None
        hyps: list[Hypothesis] = []
        for raw in f:
            line = raw.rstrip("\n")
            if not line.strip():
                if utt_id is not None:
                    out.append(NBestList(utt_id, tuple(hyps)))
                utt_id, hyps = None, []
                continue
            if utt_id is None:
                utt_id = line.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}: bad hypothesis line {line!r}")
            am, lm, wc, text = float(parts[0]), float(parts[1]), int(parts[2]), parts[3]
            words = tuple(text.split())
            if len(words) != wc:
                raise ValueError(f"{path}: word_count {wc} != {len(words)} in {line!r}")
            hyps.append(Hypothesis(words=words, am_score=am, lm_score=lm))
        if utt_id is not None:
            out.append(NBestList(utt_id, tuple(hyps)))
    return out
