"""Corpus data model, file formats, and the synthetic corpus generator.

All audio is mono 16 kHz 16-bit PCM.  Frame/sample conversion is fixed at a
10 ms hop (160 samples) with a 25 ms window so word alignments convert
exactly between frames and samples.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "SAMPLE_RATE",
    "HOP_SAMPLES",
    "WIN_SAMPLES",
    "WordSpan",
    "Utterance",
    "Corpus",
    "ManifestError",
    "ValidationError",
    "AudioFormatError",
    "MatrixFormatError",
    "read_manifest",
    "write_manifest",
    "read_wav",
    "write_wav",
    "logmel_features",
    "read_matrix",
    "write_matrix",
    "synth_corpus",
    "corpus_stats",
]

SAMPLE_RATE = 16000
HOP_SAMPLES = 160  # 10 ms at 16 kHz
WIN_SAMPLES = 400  # 25 ms at 16 kHz


class ManifestError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class AudioFormatError(ValueError):
    pass


class MatrixFormatError(ValueError):
    pass


@dataclass(frozen=True)
class WordSpan:
    word_index: int
    start_frame: int
    end_frame: int  # exclusive

    def __post_init__(self):
        if not self.start_frame < self.end_frame:
            raise ValidationError(
                f"word {self.word_index}: empty span [{self.start_frame},{self.end_frame})"
            )
        if self.start_frame < 0:
            raise ValidationError(f"word {self.word_index}: negative start frame")

    @property
    def start_sample(self) -> int:
        return self.start_frame * HOP_SAMPLES

    @property
    def end_sample(self) -> int:
        return self.end_frame * HOP_SAMPLES


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker_id: str
    dialect_id: str
    transcript: tuple[str, ...]
    audio_path: str
    sample_rate: int = SAMPLE_RATE
    duration: float = 0.0
    alignment: tuple[WordSpan, ...] | None = None

    def __post_init__(self):
        if not self.transcript:
            raise ValidationError(f"utterance {self.id}: empty transcript")
        for w in self.transcript:
            if not w or any(c.isspace() for c in w):
                raise ValidationError(
                    f"utterance {self.id}: bad word {w!r} (empty or contains whitespace)"
                )
        if self.alignment is not None:
            if len(self.alignment) != len(self.transcript):
                raise ValidationError(
                    f"utterance {self.id}: {len(self.alignment)} spans for "
                    f"{len(self.transcript)} words"
                )
            prev_end = 0
            max_frame = int(round(self.duration * self.sample_rate)) // HOP_SAMPLES
            for i, span in enumerate(self.alignment):
                if span.word_index != i:
                    raise ValidationError(f"utterance {self.id}: span order broken at {i}")
                if span.start_frame < prev_end:
                    raise ValidationError(f"utterance {self.id}: overlapping spans at word {i}")
                if span.end_frame > max_frame:
                    raise ValidationError(
                        f"utterance {self.id}: span [{span.start_frame},{span.end_frame}) "
                        f"exceeds duration ({max_frame} frames)"
                    )
                prev_end = span.end_frame

    @property
    def text(self) -> str:
        return " ".join(self.transcript)


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...]
    dialect_inventory: frozenset[str] = field(default_factory=frozenset)
    speaker_inventory: frozenset[str] = field(default_factory=frozenset)

    @staticmethod
    def from_utterances(utts) -> "Corpus":
        utts = tuple(utts)
        seen = set()
        for u in utts:
            if u.id in seen:
                raise ValidationError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
        return Corpus(
            utterances=utts,
            dialect_inventory=frozenset(u.dialect_id for u in utts),
            speaker_inventory=frozenset(u.speaker_id for u in utts),
        )

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)


# ---------------------------------------------------------------------------
# Manifest (JSON lines)

def _utt_from_record(rec: dict, line_no: int) -> Utterance:
    required = ("id", "speaker_id", "dialect_id", "text", "audio", "sample_rate", "duration")
    for key in required:
        if key not in rec:
            raise ManifestError(f"line {line_no}: missing field {key!r}")
    words = tuple(rec["text"].split())
    alignment = None
    if rec.get("alignment") is not None:
        alignment = tuple(
            WordSpan(word_index=i, start_frame=int(s), end_frame=int(e))
            for i, (s, e) in enumerate(rec["alignment"])
        )
    try:
        return Utterance(
            id=rec["id"],
            speaker_id=rec["speaker_id"],
            dialect_id=rec["dialect_id"],
            transcript=words,
            audio_path=rec["audio"],
            sample_rate=int(rec["sample_rate"]),
            duration=float(rec["duration"]),
            alignment=alignment,
        )
    except ValidationError as e:
        raise ManifestError(f"line {line_no}: {e}") from e


def read_manifest(path) -> Corpus:
    """Read a JSON-lines manifest into a Corpus, preserving line order."""
    utts = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {line_no}: malformed JSON: {e}") from e
            utts.append(_utt_from_record(rec, line_no))
    return Corpus.from_utterances(utts)


def write_manifest(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in corpus:
            rec = {
                "id": u.id,
                "speaker_id": u.speaker_id,
                "dialect_id": u.dialect_id,
                "text": u.text,
                "audio": u.audio_path,
                "sample_rate": u.sample_rate,
                "duration": u.duration,
            }
            if u.alignment is not None:
                rec["alignment"] = [[s.start_frame, s.end_frame] for s in u.alignment]
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM16 mono)

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono WAV; returns (float32 samples in [-1,1], rate)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise AudioFormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise AudioFormatError(
                    f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit"
                )
            if w.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compressed WAV not supported")
            n = w.getnframes()
            raw = w.readframes(n)
            if len(raw) != 2 * n:
                raise AudioFormatError(f"{path}: truncated payload")
            samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
            return samples, w.getframerate()
    except wave.Error as e:
        raise AudioFormatError(f"{path}: {e}") from e


def write_wav(samples, sample_rate: int, path) -> None:
    x = np.asarray(samples, dtype=np.float64)
    q = np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(q.tobytes())


# ---------------------------------------------------------------------------
# Log-mel features

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft//2 + 1)."""
    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - mid, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def logmel_features(
    samples,
    sample_rate: int,
    n_mels: int = 24,
    win_ms: float = 25.0,
    hop_ms: float = 10.0,
) -> np.ndarray:
    """Log mel-filterbank features, shape (T, n_mels), float32.

    T = 1 + floor((len - win) / hop).
    """
    if sample_rate <= 0:
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")
    x = np.asarray(samples, dtype=np.float64)
    win = int(round(sample_rate * win_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if len(x) < win:
        raise ValueError(f"need at least one window ({win} samples), got {len(x)}")
    n_frames = 1 + (len(x) - win) // hop
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    window = np.hanning(win)
    fb = mel_filterbank(n_mels, n_fft, sample_rate)
    idx = hop * np.arange(n_frames)[:, None] + np.arange(win)[None, :]
    frames = x[idx] * window
    spec = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel = spec @ fb.T
    return np.log(np.maximum(mel, 1e-10)).astype(np.float32)


# ---------------------------------------------------------------------------
# LPM1 matrix file format

_LPM1_MAGIC = b"LPM1"


def write_matrix(m: np.ndarray, path) -> None:
    m = np.ascontiguousarray(m, dtype="<f4")
    if m.ndim != 2:
        raise MatrixFormatError(f"expected 2-D matrix, got shape {m.shape}")
    with open(path, "wb") as f:
        f.write(_LPM1_MAGIC)
        f.write(struct.pack("<II", m.shape[0], m.shape[1]))
        f.write(m.tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _LPM1_MAGIC:
            raise MatrixFormatError(f"{path}: bad magic {magic!r}")
        header = f.read(8)
        if len(header) != 8:
            raise MatrixFormatError(f"{path}: truncated header")
        rows, cols = struct.unpack("<II", header)
        payload = f.read()
        if len(payload) != 4 * rows * cols:
            raise MatrixFormatError(
                f"{path}: payload size {len(payload)} != {4 * rows * cols} from header"
            )
        return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# Synthetic corpus generator
#
# Each character is a fixed tone template; dialects perturb it with a
# spectral tilt (a dialect-indexed low-frequency component) and a formant
# shift chosen so that neighbouring characters collide across dialects;
# speakers differ by gain.  Word alignments fall out of the construction.

CHAR_FRAMES = 4           # frames per character
SPACE_FRAMES = 2          # silence frames between words
EDGE_FRAMES = 2           # leading/trailing silence frames
CHAR_BASE_HZ = 500.0
CHAR_STEP_HZ = 200.0
DIALECT_SHIFT_HZ = 80.0   # per dialect index; ~half a char step over 2 dialects
DIALECT_HUM_HZ = 120.0
DIALECT_HUM_STEP_HZ = 60.0
DIALECT_HUM_AMP = 0.12
NOISE_AMP = 0.004


def _char_wave(char_index: int, dialect_index: int, n_samples: int) -> np.ndarray:
    f = CHAR_BASE_HZ + CHAR_STEP_HZ * char_index + DIALECT_SHIFT_HZ * dialect_index
    t = np.arange(n_samples) / SAMPLE_RATE
    tone = np.sin(2 * np.pi * f * t) + 0.25 * np.sin(2 * np.pi * 2 * f * t)
    # short attack/decay so concatenated characters do not click
    env = np.minimum(1.0, np.minimum(np.arange(n_samples), n_samples - 1 - np.arange(n_samples)) / 32.0)
    return tone * env


def _dialect_hum(dialect_index: int, n_samples: int) -> np.ndarray:
    f = DIALECT_HUM_HZ + DIALECT_HUM_STEP_HZ * dialect_index
    t = np.arange(n_samples) / SAMPLE_RATE
    return DIALECT_HUM_AMP * np.sin(2 * np.pi * f * t)


def synth_corpus(
    seed: int,
    n_speakers: int,
    n_dialects: int,
    n_unique_sentences: int,
    repetitions_per_sentence: int,
    charset: str,
    out_dir,
    words_per_sentence: tuple[int, int] = (2, 4),
    word_len: tuple[int, int] = (1, 3),
) -> Corpus:
    """Generate a deterministic synthetic corpus with WAVs and exact alignments.

    Writes audio under out_dir/wav/ and the manifest to out_dir/manifest.jsonl.
    """
    if min(n_speakers, n_dialects, n_unique_sentences, repetitions_per_sentence) < 1:
        raise ValueError("all counts must be >= 1")
    if len(set(charset)) < 2:
        raise ValueError("charset must contain at least 2 distinct symbols")
    chars = sorted(set(charset))
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    sentences = []
    for _ in range(n_unique_sentences):
        n_words = int(rng.integers(words_per_sentence[0], words_per_sentence[1] + 1))
        words = []
        for _ in range(n_words):
            L = int(rng.integers(word_len[0], word_len[1] + 1))
            words.append("".join(chars[int(i)] for i in rng.integers(0, len(chars), L)))
        sentences.append(tuple(words))

    speaker_gain = 0.3 + 0.5 * rng.random(n_speakers)
    speakers_of_dialect = [
        [s for s in range(n_speakers) if s % n_dialects == d] for d in range(n_dialects)
    ]
    # dialects with no speaker (n_speakers < n_dialects): borrow round-robin
    for d in range(n_dialects):
        if not speakers_of_dialect[d]:
            speakers_of_dialect[d] = [d % n_speakers]

    utts = []
    utt_index = 0
    for sent_i, words in enumerate(sentences):
        for _rep in range(repetitions_per_sentence):
            d = utt_index % n_dialects
            pool = speakers_of_dialect[d]
            spk = pool[(utt_index // n_dialects) % len(pool)]
            audio, spans = _render_utterance(words, chars, d, speaker_gain[spk], rng)
            utt_id = f"utt{utt_index:06d}"
            wav_path = wav_dir / f"{utt_id}.wav"
            write_wav(audio, SAMPLE_RATE, wav_path)
            utts.append(
                Utterance(
                    id=utt_id,
                    speaker_id=f"spk{spk:04d}",
                    dialect_id=f"dia{d}",
                    transcript=words,
                    audio_path=str(wav_path),
                    sample_rate=SAMPLE_RATE,
                    duration=len(audio) / SAMPLE_RATE,
                    alignment=spans,
                )
            )
            utt_index += 1

    corpus = Corpus.from_utterances(utts)
    write_manifest(corpus, out_dir / "manifest.jsonl")
    return corpus


def _render_utterance(words, chars, dialect_index, gain, rng):
    """Render one utterance; returns (float samples, word spans tiling all frames)."""
    pieces = [np.zeros(EDGE_FRAMES * HOP_SAMPLES)]
    char_starts = []  # frame index where each word's first char starts
    frame_cursor = EDGE_FRAMES
    for wi, word in enumerate(words):
        char_starts.append(frame_cursor)
        for c in word:
            n = CHAR_FRAMES * HOP_SAMPLES
            pieces.append(_char_wave(chars.index(c), dialect_index, n))
            frame_cursor += CHAR_FRAMES
        if wi != len(words) - 1:
            pieces.append(np.zeros(SPACE_FRAMES * HOP_SAMPLES))
            frame_cursor += SPACE_FRAMES
    pieces.append(np.zeros(EDGE_FRAMES * HOP_SAMPLES))
    frame_cursor += EDGE_FRAMES

    audio = np.concatenate(pieces)
    total_frames = frame_cursor
    assert len(audio) == total_frames * HOP_SAMPLES
    audio = gain * (audio + _dialect_hum(dialect_index, len(audio)))
    audio = audio + NOISE_AMP * rng.standard_normal(len(audio))
    audio = np.clip(audio, -1.0, 1.0)

    # word spans tile [0, total_frames): gaps attach to the preceding word,
    # leading silence to the first word
    spans = []
    for wi in range(len(words)):
        start = 0 if wi == 0 else char_starts[wi]
        end = char_starts[wi + 1] if wi + 1 < len(words) else total_frames
        spans.append(WordSpan(word_index=wi, start_frame=start, end_frame=end))
    return audio, tuple(spans)


# ---------------------------------------------------------------------------

def corpus_stats(c: Corpus) -> dict:
    texts = {" ".join(u.transcript) for u in c}
    return {
        "hours": sum(u.duration for u in c) / 3600.0,
        "n_speakers": len(c.speaker_inventory),
        "n_utterances": len(c),
        "n_unique_sentences": len(texts),
        "n_dialects": len(c.dialect_inventory),
    }
