"""Aligned Data Augmentation: offline word replacement in transcript and
waveform, restricted to donor words from other utterances of the same
speaker.

Word spans tile each utterance's frames (see the alignment convention in
the ctc module), so cutting at span boundaries is sample-exact.  Splices
keep the 160-sample frame grid: junctions are smoothed with a 5 ms linear
fade on each side instead of a length-changing overlap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    HOP_SAMPLES,
    SAMPLE_RATE,
    Corpus,
    Utterance,
    WordSpan,
    read_wav,
    write_manifest,
    write_wav,
)

__all__ = [
    "InventoryEntry",
    "WordInventory",
    "AugmentationPlan",
    "build_inventory",
    "plan",
    "apply",
    "write_plan",
    "read_plan",
]

CROSSFADE_SAMPLES = 80  # 5 ms at 16 kHz


@dataclass(frozen=True)
class InventoryEntry:
    word: str
    utterance_id: str
    span: WordSpan
    audio_path: str


@dataclass
class WordInventory:
    by_speaker: dict[str, list[InventoryEntry]] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_speaker.values())


@dataclass
class AugmentationPlan:
    replace_rate: float
    seed: int
    # utterance id -> list of (word index, donor entry)
    replacements: dict[str, list[tuple[int, InventoryEntry]]] = field(default_factory=dict)
    skipped: tuple[str, ...] = ()


def build_inventory(corpus: Corpus) -> WordInventory:
    inv = WordInventory()
    for u in corpus:
        if u.alignment is None:
            raise ValueError(f"utterance {u.id} has no alignment")
        entries = inv.by_speaker.setdefault(u.speaker_id, [])
        for word, span in zip(u.transcript, u.alignment):
            entries.append(InventoryEntry(word=word, utterance_id=u.id,
                                          span=span, audio_path=u.audio_path))
    return inv


def plan(corpus: Corpus, inventory: WordInventory, replace_rate: float = 0.2,
         seed: int = 0) -> AugmentationPlan:
    """Choose replacement targets and same-speaker donors.

    k = max(1, round(rate * n_words)) per utterance (0 when rate is 0);
    utterances whose speaker has no other utterance are skipped and flagged.
    """
    if not 0.0 <= replace_rate <= 1.0:
        raise ValueError(f"replace_rate {replace_rate} outside [0, 1]")
    rng = np.random.default_rng(seed)
    out = AugmentationPlan(replace_rate=replace_rate, seed=seed)
    skipped = []
    for u in corpus:
        if replace_rate == 0.0:
            continue
        donors = [e for e in inventory.by_speaker.get(u.speaker_id, ())
                  if e.utterance_id != u.id]
        if not donors:
            skipped.append(u.id)
            continue
        n = len(u.transcript)
        k = min(n, max(1, round(replace_rate * n)))
        targets = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
        picks = [donors[int(i)] for i in rng.integers(0, len(donors), size=k)]
        out.replacements[u.id] = list(zip(targets, picks))
    out.skipped = tuple(skipped)
    return out


def _fade_junction(audio: np.ndarray, pos: int) -> None:
    """Linear fade-out into and fade-in out of a splice point."""
    lo = max(0, pos - CROSSFADE_SAMPLES)
    audio[lo:pos] *= np.linspace(1.0, 0.0, pos - lo)
    hi = min(len(audio), pos + CROSSFADE_SAMPLES)
    audio[pos:hi] *= np.linspace(0.0, 1.0, hi - pos)


def apply(corpus: Corpus, augment_plan: AugmentationPlan, out_dir) -> Corpus:
    """Materialize the augmented corpus: originals plus one '.ada' variant
    per planned utterance."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    audio_cache: dict[str, np.ndarray] = {}

    def samples_of(path: str) -> np.ndarray:
        if path not in audio_cache:
            audio_cache[path] = read_wav(path)[0].astype(np.float64)
        return audio_cache[path]

    augmented = []
    for u in corpus:
        reps = augment_plan.replacements.get(u.id)
        if not reps:
            continue
        if u.alignment is None:
            raise ValueError(f"utterance {u.id} has no alignment")
        rep_map = dict(reps)
        for wi, donor in rep_map.items():
            if donor.span.end_sample > len(samples_of(donor.audio_path)):
                raise ValueError(f"donor segment for {u.id} word {wi} has missing audio")
        src = samples_of(u.audio_path)
        segments = []
        words = []
        junctions = []  # sample offsets where spliced material meets original
        cursor = 0
        for wi, word in enumerate(u.transcript):
            span = u.alignment[wi]
            if wi in rep_map:
                donor = rep_map[wi]
                seg = samples_of(donor.audio_path)[donor.span.start_sample:donor.span.end_sample]
                words.append(donor.word)
                junctions.append(cursor)
                junctions.append(cursor + len(seg))
            else:
                seg = src[span.start_sample:span.end_sample]
                words.append(word)
            segments.append(seg)
            cursor += len(seg)
        audio = np.concatenate(segments)
        for pos in junctions:
            if 0 < pos < len(audio):
                _fade_junction(audio, pos)

        new_spans = []
        start = 0
        for wi, seg in enumerate(segments):
            nframes = len(seg) // HOP_SAMPLES
            new_spans.append(WordSpan(word_index=wi, start_frame=start,
                                      end_frame=start + nframes))
            start += nframes
        new_id = u.id + ".ada"
        wav_path = wav_dir / f"{new_id}.wav"
        write_wav(audio, SAMPLE_RATE, wav_path)
        augmented.append(
            Utterance(
                id=new_id,
                speaker_id=u.speaker_id,
                dialect_id=u.dialect_id,
                transcript=tuple(words),
                audio_path=str(wav_path),
                sample_rate=SAMPLE_RATE,
                duration=len(audio) / SAMPLE_RATE,
                alignment=tuple(new_spans),
            )
        )

    out = Corpus.from_utterances(tuple(corpus.utterances) + tuple(augmented))
    write_manifest(out, out_dir / "manifest.jsonl")
    return out


# ---------------------------------------------------------------------------
# Plan serialization (JSON lines, for audit)


def write_plan(augment_plan: AugmentationPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {"replace_rate": augment_plan.replace_rate, "seed": augment_plan.seed,
                  "skipped": list(augment_plan.skipped)}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for utt_id in augment_plan.replacements:
            for wi, e in augment_plan.replacements[utt_id]:
                rec = {
                    "utt": utt_id,
                    "word_index": wi,
                    "donor_word": e.word,
                    "donor_utt": e.utterance_id,
                    "donor_frames": [e.span.start_frame, e.span.end_frame],
                    "donor_audio": e.audio_path,
                }
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_plan(path) -> AugmentationPlan:
    with open(path, encoding="utf-8") as f:
        lines = [json.loads(ln) for ln in f if ln.strip()]
    header, records = lines[0], lines[1:]
    out = AugmentationPlan(replace_rate=header["replace_rate"], seed=header["seed"],
                           skipped=tuple(header["skipped"]))
    for rec in records:
        entry = InventoryEntry(
            word=rec["donor_word"],
            utterance_id=rec["donor_utt"],
            span=WordSpan(word_index=0, start_frame=rec["donor_frames"][0],
                          end_frame=rec["donor_frames"][1]),
            audio_path=rec["donor_audio"],
        )
        out.replacements.setdefault(rec["utt"], []).append((rec["word_index"], entry))
    return out
