"""Command-line interface: the whole pipeline as subcommands.

Every subcommand is a thin wrapper over module operations.  Runs are
deterministic given --seed; commands that write files also write a run
manifest (inputs, seeds, SHA-256 of outputs) next to their primary output,
and partial outputs are removed if the command fails.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import ada
from . import corpus as corp
from . import experiments
from . import fusion
from . import lm as lmod
from . import model as mod
from . import nbest as nbm
from . import prefix as pfx
from .ctc import CharVocab, beam_search, force_align, greedy_decode
from .score import cer, wer

__all__ = ["main"]


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(primary_output, args: argparse.Namespace, outputs) -> None:
    record = {
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items())
                      if k not in ("command", "func")},
        "outputs": {str(p): _sha256(p) for p in outputs if Path(p).is_file()},
    }
    path = Path(str(primary_output) + ".run.json")
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _load_corpus_features(manifest, n_mels):
    c = corp.read_manifest(manifest)
    feats = {}
    for u in c:
        samples, sr = corp.read_wav(u.audio_path)
        feats[u.id] = corp.logmel_features(samples, sr, n_mels=n_mels)
    return c, feats


def _charset_of(c) -> str:
    chars = sorted({ch for u in c for w in u.transcript for ch in w})
    return "".join(chars)


def _map_jobs(fn, items, jobs: int):
    """Apply fn to items, optionally in parallel; output order is input order."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _read_trn(path):
    """utterance-id<TAB>words lines -> ordered dict of word tuples."""
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{i}: expected 'utt<TAB>words'")
        utt, text = line.split("\t", 1)
        out[utt] = tuple(text.split())
    return out


def _write_trn(hyps: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt, words in hyps.items():
            f.write(f"{utt}\t{' '.join(words)}\n")


def _read_sentences(path):
    return [ln for ln in Path(path).read_text().splitlines() if ln.strip()]


# ---------------------------------------------------------------------------
# subcommand handlers (each returns the list of files it wrote)


def cmd_synth(args):
    c = corp.synth_corpus(seed=args.seed, n_speakers=args.speakers,
                          n_dialects=args.dialects,
                          n_unique_sentences=args.sentences,
                          repetitions_per_sentence=args.reps,
                          charset=args.charset, out_dir=args.out)
    _log(f"synthesized {len(c)} utterances in {args.out}")
    return [Path(args.out) / "manifest.jsonl"]


def cmd_stats(args):
    c = corp.read_manifest(args.manifest)
    print(json.dumps(corp.corpus_stats(c), indent=2, sort_keys=True))
    return []


def cmd_train(args):
    c, feats = _load_corpus_features(args.manifest, args.n_mels)
    vocab = CharVocab.from_charset(_charset_of(c))
    mcfg = mod.ModelConfig(feature_dim=args.n_mels, vocab_size=len(vocab),
                           d_model=args.d_model, n_layers=args.layers,
                           n_heads=args.heads, ffn_dim=args.ffn,
                           layerdrop_p=args.layerdrop,
                           seed=experiments.substream(args.seed, "model-init"))
    tcfg = mod.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                           epochs=args.epochs,
                           warmup_classifier_updates=args.warmup_classifier,
                           use_spec_augment=args.spec_augment,
                           seed=experiments.substream(args.seed, "train"))
    dev_c = dev_feats = None
    if args.dev_manifest:
        dev_c, dev_feats = _load_corpus_features(args.dev_manifest, args.n_mels)
    params, trace = mod.train(c, feats, tcfg, mcfg, vocab,
                              dev_corpus=dev_c, dev_features=dev_feats)
    mod.save_checkpoint(params, mcfg, args.out,
                        extra_meta={"charset": _charset_of(c)})
    trace_path = Path(str(args.out) + ".trace.json")
    trace_path.write_text(json.dumps(trace, indent=2) + "\n")
    _log(f"final loss {trace[-1]['loss']:.4f}")
    return [args.out, trace_path]


def _load_model(path):
    _, meta = mod.load_tensors(path)
    params, cfg = mod.load_checkpoint(path)
    return params, cfg, CharVocab.from_charset(meta["charset"])


def cmd_ada_align(args):
    c, feats = _load_corpus_features(args.manifest, args.n_mels)
    params, mcfg, vocab = _load_model(args.model)
    aligned = []
    for u in c:
        logz, _ = mod.forward(params, feats[u.id], mcfg)
        res = force_align(logz, vocab, u.transcript)
        aligned.append(corp.Utterance(
            id=u.id, speaker_id=u.speaker_id, dialect_id=u.dialect_id,
            transcript=u.transcript, audio_path=u.audio_path,
            sample_rate=u.sample_rate, duration=u.duration,
            alignment=tuple(res.word_spans)))
    corp.write_manifest(corp.Corpus.from_utterances(aligned), args.out)
    return [args.out]


def cmd_ada_augment(args):
    c = corp.read_manifest(args.manifest)
    inventory = ada.build_inventory(c)
    plan = ada.plan(c, inventory, replace_rate=args.rate,
                    seed=experiments.substream(args.seed, "ada-plan"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ada.write_plan(plan, out_dir / "plan.jsonl")
    augmented = ada.apply(c, plan, out_dir)
    _log(f"{len(augmented) - len(c)} augmented utterances "
         f"({len(plan.skipped)} skipped)")
    return [out_dir / "manifest.jsonl", out_dir / "plan.jsonl"]


def cmd_lm_train(args):
    if args.manifest:
        c = corp.read_manifest(args.manifest)
        sentences = [" ".join(u.transcript) for u in c]
    else:
        sentences = _read_sentences(args.text)
    model = lmod.train_kn(sentences, order=args.order)
    for w in model.warnings:
        _log(f"warning: {w}")
    lmod.arpa_write(model, args.out)
    return [args.out]


def cmd_lm_ppl(args):
    model = lmod.arpa_read(args.lm)
    print(json.dumps(lmod.perplexity(model, _read_sentences(args.text)),
                     indent=2, sort_keys=True))
    return []


def cmd_lm_interpolate(args):
    models = [lmod.arpa_read(p) for p in args.lms]
    merged, weights = lmod.interpolate(models, _read_sentences(args.dev))
    lmod.arpa_write(merged, args.out)
    _log(f"mixture weights: {[round(w, 6) for w in weights.weights]}")
    return [args.out]


def cmd_lm_sample(args):
    model = lmod.arpa_read(args.lm)
    for s in lmod.sample_sentences(model, args.n, max_len=args.max_len,
                                   seed=experiments.substream(args.seed, "lm-sample")):
        print(" ".join(s))
    return []


def _decode_corpus(args, n_best=None):
    c, feats = _load_corpus_features(args.manifest, args.n_mels)
    params, mcfg, vocab = _load_model(args.model)
    lm = lmod.arpa_read(args.lm) if args.lm and args.lm != "none" else None
    bank = pfx.load_prefix_bank(args.prefixes) if getattr(args, "prefixes", None) else None
    use_dialect = bool(getattr(args, "dialect", False))

    def one(u):
        entry = None
        if bank is not None and use_dialect:
            entry = bank.prefixes[u.dialect_id]
        logz, _ = mod.forward(params, feats[u.id], mcfg, prefix=entry)
        # beam-1 without an LM is defined to produce the greedy transcript;
        # the beam's marginalization could otherwise pick a different string
        greedy_equiv = (args.mode == "beam" and args.beam_width == 1
                        and lm is None and n_best is None)
        if args.mode == "greedy" or greedy_equiv:
            words = greedy_decode(logz, vocab)
            return nbm.NBestList(u.id, (nbm.Hypothesis(words, 0.0, 0.0),))
        nb = beam_search(logz, vocab, lm=lm, beam_width=args.beam_width,
                         alpha=args.alpha, beta=args.beta, n_best=n_best)
        return nbm.NBestList(u.id, nb.hypotheses)

    return c, _map_jobs(one, list(c), args.jobs)


def cmd_decode(args):
    _, nbests = _decode_corpus(args)
    hyps = {nb.utterance_id: nb.hypotheses[0].words for nb in nbests}
    _write_trn(hyps, args.out)
    return [args.out]


def cmd_nbest_dump(args):
    _, nbests = _decode_corpus(args, n_best=args.n_best)
    nbm.write_nbest_file(nbests, args.out)
    return [args.out]


def cmd_prefix_train(args):
    c, feats = _load_corpus_features(args.manifest, args.n_mels)
    params, mcfg, vocab = _load_model(args.model)
    pcfg = pfx.PrefixConfig(n_layers=mcfg.n_layers, d_model=mcfg.d_model,
                            prefix_length=args.prefix_length)
    bank = pfx.train_prefixes(params, mcfg, c, feats, vocab, pcfg,
                              lr=args.lr, weight_decay=args.weight_decay,
                              batch_size=args.batch_size, epochs=args.epochs,
                              seed=experiments.substream(args.seed, "prefix-train"))
    for w in bank.warnings:
        _log(f"warning: {w}")
    pfx.save_prefix_bank(bank, args.out)
    return [args.out]


def _load_systems(paths):
    systems = [nbm.read_nbest_file(p) for p in paths]
    ids = [nb.utterance_id for nb in systems[0]]
    for s in systems[1:]:
        if [nb.utterance_id for nb in s] != ids:
            raise ValueError("systems cover different utterance sets")
    return systems, ids


def cmd_fuse_optimize(args):
    systems, ids = _load_systems(args.systems)
    refs_map = _read_trn(args.ref)
    refs = [refs_map[i] for i in ids]
    sws = [fusion.optimize_system_weights(s, refs) for s in systems]
    cw = fusion.optimize_combination_weights(systems, refs, sws)
    record = {
        "system_weights": [
            {"lm_weight": w.lm_weight, "length_weight": w.length_weight,
             "posterior_scale": w.posterior_scale} for w in sws
        ],
        "combination_weights": list(cw.weights),
    }
    Path(args.out).write_text(json.dumps(record, indent=2) + "\n")
    return [args.out]


def cmd_fuse(args):
    systems, ids = _load_systems(args.systems)
    record = json.loads(Path(args.weights).read_text())
    sws = [fusion.SystemWeights(**w) for w in record["system_weights"]]
    cw = fusion.CombinationWeights(weights=tuple(record["combination_weights"]))
    fused = fusion.fuse(systems, cw, sws)
    _write_trn(dict(zip(ids, fused)), args.out)
    return [args.out]


def cmd_score(args):
    refs_map = _read_trn(args.ref)
    hyps_map = _read_trn(args.hyp)
    missing = set(refs_map) - set(hyps_map)
    if missing:
        raise ValueError(f"hypotheses missing for {sorted(missing)[:5]}")
    refs = [list(refs_map[u]) for u in refs_map]
    hyps = [list(hyps_map[u]) for u in refs_map]
    print(json.dumps({"wer": wer(refs, hyps), "cer": cer(refs, hyps),
                      "n_utterances": len(refs)}, indent=2, sort_keys=True))
    return []


def _run_experiment(runner, args):
    result = runner(seed=args.seed, out_dir=args.out)
    print(json.dumps(result, indent=2, sort_keys=True))
    return [Path(args.out) / "result.json"]


def cmd_exp_fig4(args):
    return _run_experiment(experiments.run_fig4, args)


def cmd_exp_table4(args):
    return _run_experiment(experiments.run_table4, args)


def cmd_exp_pipeline(args):
    return _run_experiment(experiments.run_pipeline, args)


# ---------------------------------------------------------------------------
# parser


def _add_decode_flags(p):
    p.add_argument("--mode", choices=("greedy", "beam"), default="beam")
    p.add_argument("--beam-width", type=int, default=8)
    p.add_argument("--lm", default="none", help="ARPA file or 'none'")
    p.add_argument("--alpha", type=float, default=0.5, help="LM fusion weight")
    p.add_argument("--beta", type=float, default=0.0, help="word insertion bonus")
    p.add_argument("--prefixes", default=None, help="prefix bank checkpoint")
    p.add_argument("--dialect", action="store_true",
                   help="use each utterance's dialect prefix from --prefixes")
    p.add_argument("--jobs", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dialectasr",
        description="Desk-scale dialect ASR pipeline: synthetic speech, "
                    "CTC training, prefix adaptation, augmentation, LMs, fusion.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, help="generate a synthetic aligned corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--speakers", type=int, default=6)
    p.add_argument("--dialects", type=int, default=3)
    p.add_argument("--sentences", type=int, default=20)
    p.add_argument("--reps", type=int, default=6)
    p.add_argument("--charset", default="abcdefgh")

    p = add("stats", cmd_stats, help="corpus statistics as JSON")
    p.add_argument("--manifest", required=True)

    p = add("train", cmd_train, help="CTC-train the encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dev-manifest", default=None)
    p.add_argument("--n-mels", type=int, default=8)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=32)
    p.add_argument("--layerdrop", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--warmup-classifier", type=int, default=0)
    p.add_argument("--spec-augment", action="store_true")

    p = add("ada-align", cmd_ada_align, help="force-align a corpus with a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-mels", type=int, default=8)

    p = add("ada-augment", cmd_ada_augment, help="aligned word-substitution augmentation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--rate", type=float, default=0.2)

    p = add("lm-train", cmd_lm_train, help="train a Kneser-Ney n-gram LM")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="one sentence per line")
    src.add_argument("--manifest")
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--out", required=True)

    p = add("lm-ppl", cmd_lm_ppl, help="perplexity of a text under an ARPA LM")
    p.add_argument("--lm", required=True)
    p.add_argument("--text", required=True)

    p = add("lm-interpolate", cmd_lm_interpolate, help="EM-interpolate LMs on dev text")
    p.add_argument("--lms", nargs="+", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True)

    p = add("lm-sample", cmd_lm_sample, help="sample sentences from an ARPA LM")
    p.add_argument("--lm", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--seed", type=int, required=True)

    p = add("decode", cmd_decode, help="decode a corpus to 1-best transcripts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-mels", type=int, default=8)
    _add_decode_flags(p)

    p = add("nbest-dump", cmd_nbest_dump, help="decode a corpus to N-best lists")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-best", type=int, default=4)
    p.add_argument("--n-mels", type=int, default=8)
    _add_decode_flags(p)

    p = add("prefix-train", cmd_prefix_train, help="train per-dialect prefixes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-mels", type=int, default=8)
    p.add_argument("--prefix-length", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--epochs", type=int, default=2)

    p = add("fuse-optimize", cmd_fuse_optimize, help="optimize fusion weights on dev")
    p.add_argument("--systems", nargs="+", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)

    p = add("fuse", cmd_fuse, help="confusion-network fusion of N-best systems")
    p.add_argument("--systems", nargs="+", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)

    p = add("score", cmd_score, help="WER/CER of hypotheses against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)

    for name, fn in (("exp-fig4", cmd_exp_fig4),
                     ("exp-table4", cmd_exp_table4),
                     ("exp-pipeline", cmd_exp_pipeline)):
        p = add(name, fn, help=f"run the {name[4:]} experiment")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=17)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # targets that do not yet exist are ours to remove if the command fails
    declared = [Path(getattr(args, "out"))] if hasattr(args, "out") else []
    fresh = [p for p in declared if not p.exists()]
    try:
        outputs = args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        for p in fresh:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
        _log(f"error: {exc}")
        return 1
    if outputs:
        _write_run_manifest(outputs[0], args, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
