"""Desk-scale experiment drivers.

Each experiment builds a synthetic corpus, trains the toy encoder, and
emits a machine-readable result table {experiment, seed, rows: [{condition,
wer, cer}]}.  All randomness is derived from the single experiment seed
through named sub-streams, so repeated runs are byte-identical.

- prefix_adaptation ("table4" analog): dialect-agnostic backbone versus
  per-dialect prefix tuning, decoded with and without LM shallow fusion.
  The synthetic dialects shift every character's tone by a sub-mel-bin
  offset, so a capacity-limited dialect-agnostic model confuses characters
  across dialects while dialect-conditioned prefixes can separate them.
- aligned_augmentation ("fig4" analog): a high-repetition corpus (few
  unique sentences spoken many times) trained with and without aligned
  word-substitution augmentation.
- pipeline: a miniature end-to-end run (synth, train, prefix-tune, decode
  two systems, fuse, score) used to check whole-pipeline determinism.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import ada
from . import corpus as corp
from . import fusion
from . import lm as lmod
from . import model as mod
from . import prefix as pfx
from .ctc import CharVocab, beam_search
from .score import cer, wer

__all__ = [
    "substream",
    "run_table4",
    "run_fig4",
    "run_pipeline",
    "write_result",
]

N_MELS = 8


def substream(seed: int, name: str) -> int:
    """Deterministic named sub-seed of an experiment seed."""
    key = [seed] + [ord(c) for c in name]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _featurize(utts):
    out = {}
    for u in utts:
        samples, sr = corp.read_wav(u.audio_path)
        out[u.id] = corp.logmel_features(samples, sr, n_mels=N_MELS)
    return out


def _split(utts, every: int):
    dev = [u for i, u in enumerate(utts) if i % every == every - 1]
    train = [u for i, u in enumerate(utts) if i % every != every - 1]
    return train, dev


def _decode_all(params, mcfg, utts, features, vocab, bank=None, lm=None,
                beam_width=4, alpha=0.5):
    hyps = []
    for u in utts:
        entry = bank.prefixes[u.dialect_id] if bank is not None else None
        logz, _ = mod.forward(params, features[u.id], mcfg, prefix=entry)
        nb = beam_search(logz, vocab, lm=lm, beam_width=beam_width,
                         alpha=alpha if lm is not None else 0.0)
        hyps.append(list(nb.hypotheses[0].words))
    return hyps


def _row(condition, refs, hyps):
    return {"condition": condition,
            "wer": wer(refs, hyps),
            "cer": cer(refs, hyps)}


def write_result(result: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# prefix adaptation experiment


def run_table4(seed: int = 17, out_dir="exp-table4") -> dict:
    """Dialect-agnostic backbone vs per-dialect prefix tuning, +/- LM."""
    out_dir = Path(out_dir)
    charset = "abcdefgh"
    c = corp.synth_corpus(seed=seed, n_speakers=6, n_dialects=3,
                          n_unique_sentences=20, repetitions_per_sentence=6,
                          charset=charset, out_dir=out_dir / "corpus")
    train, dev = _split(list(c), 4)
    features = _featurize(list(c))
    vocab = CharVocab.from_charset(charset)

    mcfg = mod.ModelConfig(feature_dim=N_MELS, vocab_size=len(vocab),
                           d_model=16, n_layers=1, n_heads=4, ffn_dim=32,
                           seed=substream(seed, "model-init"))
    tcfg = mod.TrainConfig(learning_rate=3e-3, batch_size=8, epochs=60,
                           seed=substream(seed, "backbone-train"))
    params, _ = mod.train(train, features, tcfg, mcfg, vocab)
    mod.save_checkpoint(params, mcfg, out_dir / "backbone.ckp")

    lm = lmod.train_kn([" ".join(u.transcript) for u in train], order=2)
    lmod.arpa_write(lm, out_dir / "train.arpa")

    pcfg = pfx.PrefixConfig(n_layers=mcfg.n_layers, d_model=mcfg.d_model,
                            prefix_length=4)
    bank = pfx.train_prefixes(params, mcfg, train, features, vocab, pcfg,
                              lr=0.1, weight_decay=0.001, batch_size=1,
                              epochs=2, seed=substream(seed, "prefix-train"))
    pfx.save_prefix_bank(bank, out_dir / "prefixes.ckp")

    refs = [list(u.transcript) for u in dev]
    rows = []
    for bank_arg, tag in ((None, "backbone"), (bank, "prefix")):
        for lm_arg, lm_tag in ((None, "no-lm"), (lm, "with-lm")):
            hyps = _decode_all(params, mcfg, dev, features, vocab,
                               bank=bank_arg, lm=lm_arg)
            rows.append(_row(f"{tag}/{lm_tag}", refs, hyps))
    result = {"experiment": "prefix_adaptation", "seed": seed, "rows": rows}
    write_result(result, out_dir / "result.json")
    return result


# ---------------------------------------------------------------------------
# aligned augmentation experiment


def run_fig4(seed: int = 17, out_dir="exp-fig4") -> dict:
    """High-repetition corpus trained with and without aligned augmentation."""
    out_dir = Path(out_dir)
    charset = "abcdef"
    c = corp.synth_corpus(seed=seed, n_speakers=6, n_dialects=2,
                          n_unique_sentences=20, repetitions_per_sentence=30,
                          charset=charset, out_dir=out_dir / "corpus")
    train, dev = _split(list(c), 5)
    train_c = corp.Corpus.from_utterances(train)
    inventory = ada.build_inventory(train_c)
    plan = ada.plan(train_c, inventory, replace_rate=0.2,
                    seed=substream(seed, "ada-plan"))
    ada.write_plan(plan, out_dir / "plan.jsonl")
    augmented = ada.apply(train_c, plan, out_dir / "augmented")

    features = _featurize(list(augmented) + dev)
    vocab = CharVocab.from_charset(charset)
    mcfg = mod.ModelConfig(feature_dim=N_MELS, vocab_size=len(vocab),
                           d_model=16, n_layers=1, n_heads=4, ffn_dim=32,
                           seed=substream(seed, "model-init"))
    refs = [list(u.transcript) for u in dev]
    rows = []
    for tag, corpus_used in (("normal", train), ("ada", list(augmented))):
        tcfg = mod.TrainConfig(learning_rate=3e-3, batch_size=8, epochs=8,
                               seed=substream(seed, f"{tag}-train"))
        params, _ = mod.train(corpus_used, features, tcfg, mcfg, vocab)
        mod.save_checkpoint(params, mcfg, out_dir / f"{tag}.ckp")
        hyps = _decode_all(params, mcfg, dev, features, vocab, beam_width=4)
        rows.append(_row(tag, refs, hyps))
    result = {"experiment": "aligned_augmentation", "seed": seed, "rows": rows}
    write_result(result, out_dir / "result.json")
    return result


# ---------------------------------------------------------------------------
# end-to-end pipeline (determinism check)


def run_pipeline(seed: int = 17, out_dir="exp-pipeline") -> dict:
    """Miniature synth -> train -> prefix-tune -> decode -> fuse -> score."""
    out_dir = Path(out_dir)
    # tones must span several mel bins at N_MELS=8, hence the wide charset
    charset = "abcdefgh"
    c = corp.synth_corpus(seed=seed, n_speakers=6, n_dialects=2,
                          n_unique_sentences=12, repetitions_per_sentence=8,
                          charset=charset, out_dir=out_dir / "corpus")
    train, dev = _split(list(c), 4)
    features = _featurize(list(c))
    vocab = CharVocab.from_charset(charset)
    mcfg = mod.ModelConfig(feature_dim=N_MELS, vocab_size=len(vocab),
                           d_model=16, n_layers=1, n_heads=4, ffn_dim=32,
                           seed=substream(seed, "model-init"))
    tcfg = mod.TrainConfig(learning_rate=3e-3, batch_size=8, epochs=60,
                           seed=substream(seed, "backbone-train"))
    params, _ = mod.train(train, features, tcfg, mcfg, vocab)
    lm = lmod.train_kn([" ".join(u.transcript) for u in train], order=2)
    pcfg = pfx.PrefixConfig(n_layers=mcfg.n_layers, d_model=mcfg.d_model,
                            prefix_length=4)
    bank = pfx.train_prefixes(params, mcfg, train, features, vocab, pcfg,
                              lr=0.1, weight_decay=0.001, batch_size=1,
                              epochs=2, seed=substream(seed, "prefix-train"))

    # two systems for fusion: dialect-agnostic and prefix-adapted decodes
    def nbests(bank_arg):
        out = []
        for u in dev:
            entry = bank_arg.prefixes[u.dialect_id] if bank_arg else None
            logz, _ = mod.forward(params, features[u.id], mcfg, prefix=entry)
            out.append(beam_search(logz, vocab, lm=lm, beam_width=4,
                                   alpha=0.5, n_best=4))
        return out

    systems = [nbests(None), nbests(bank)]
    refs = [tuple(u.transcript) for u in dev]
    sws = [fusion.optimize_system_weights(s, refs) for s in systems]
    cw = fusion.optimize_combination_weights(systems, refs, sws)
    fused = fusion.fuse(systems, cw, sws)

    ref_lists = [list(r) for r in refs]
    rows = [
        _row("backbone", ref_lists,
             [list(fusion.rescore(nb, sws[0]).hypotheses[0].words) for nb in systems[0]]),
        _row("prefix", ref_lists,
             [list(fusion.rescore(nb, sws[1]).hypotheses[0].words) for nb in systems[1]]),
        _row("fusion", ref_lists, [list(h) for h in fused]),
    ]
    result = {"experiment": "pipeline", "seed": seed, "rows": rows}
    write_result(result, out_dir / "result.json")
    return result
