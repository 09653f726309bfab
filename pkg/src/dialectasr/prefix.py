"""Dialect adaptation via deep prefix tuning.

Per-dialect key/value tensors are prepended to every attention layer of a
frozen backbone.  Prefixes contribute no queries, receive no positional
encoding, and produce no outputs; they are stored full-width (d_model) and
split across heads at use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as m
from .ctc import CharVocab, beam_search, ctc_loss
from .nbest import NBestList

__all__ = [
    "PrefixConfig",
    "PrefixBank",
    "DialectDecodeResult",
    "count_prefix_params",
    "init_prefix",
    "apply_prefix",
    "train_prefixes",
    "decode_with_dialect",
    "save_prefix_bank",
    "load_prefix_bank",
]

PREFIX_INIT_STD = 0.02


@dataclass(frozen=True)
class PrefixConfig:
    n_layers: int
    d_model: int
    prefix_length: int = 4

    def __post_init__(self):
        if self.prefix_length < 0:
            raise ValueError("prefix_length must be >= 0")


@dataclass
class PrefixBank:
    config: PrefixConfig
    # dialect id -> per layer (keys, values), each prefix_length x d_model
    prefixes: dict[str, list[tuple[np.ndarray, np.ndarray]]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __contains__(self, dialect_id: str) -> bool:
        return dialect_id in self.prefixes


@dataclass(frozen=True)
class DialectDecodeResult:
    nbest: NBestList
    dialect_fallback: bool


def count_prefix_params(cfg: PrefixConfig) -> int:
    return cfg.prefix_length * cfg.n_layers * cfg.d_model * 2


def init_prefix(cfg: PrefixConfig, rng: np.random.Generator, dtype=np.float32):
    return [
        (
            (PREFIX_INIT_STD * rng.standard_normal((cfg.prefix_length, cfg.d_model))).astype(dtype),
            (PREFIX_INIT_STD * rng.standard_normal((cfg.prefix_length, cfg.d_model))).astype(dtype),
        )
        for _ in range(cfg.n_layers)
    ]


def apply_prefix(q, k, v, prefix_keys, prefix_values, n_heads: int):
    """Multi-head attention over [prefix ; content] key/value slots.

    q, k, v: (T, d) projected content tensors; prefix tensors: (L, d).
    Returns (output (T, d), attention (heads, T, L+T)); queries come only
    from content positions, so the output keeps T rows.
    """
    T, d = q.shape
    if prefix_keys.shape != prefix_values.shape or prefix_keys.shape[1] != d:
        raise ValueError("prefix shape mismatch")
    L = prefix_keys.shape[0]
    dh = d // n_heads

    def heads(x):
        return x.reshape(x.shape[0], n_heads, dh).transpose(1, 0, 2)

    K = np.concatenate([heads(prefix_keys), heads(k)], axis=1)
    V = np.concatenate([heads(prefix_values), heads(v)], axis=1)
    S = np.einsum("hid,hjd->hij", heads(q), K) / math.sqrt(dh)
    S = S - S.max(axis=2, keepdims=True)
    e = np.exp(S)
    A = e / e.sum(axis=2, keepdims=True)
    O = np.einsum("hij,hjd->hid", A, V)
    return O.transpose(1, 0, 2).reshape(T, d), A


def _prefix_or_none(entry):
    if entry and entry[0][0].shape[0] > 0:
        return entry
    return None


def train_prefixes(
    backbone: dict,
    model_cfg: m.ModelConfig,
    corpus,
    features: dict,
    vocab: CharVocab,
    cfg: PrefixConfig,
    lr: float = 0.01,
    weight_decay: float = 0.001,
    batch_size: int = 8,
    epochs: int = 2,
    seed: int = 0,
) -> PrefixBank:
    """Train one prefix per dialect on that dialect's utterances only.

    The backbone is never touched.  epochs is capped at 2 by contract.
    """
    if not (1 <= epochs <= 2):
        raise ValueError("prefix training uses 1-2 epochs")
    if cfg.n_layers != model_cfg.n_layers or cfg.d_model != model_cfg.d_model:
        raise ValueError("prefix config does not match the backbone")
    bank = PrefixBank(config=cfg)
    by_dialect: dict[str, list] = {d: [] for d in sorted({u.dialect_id for u in corpus})}
    for u in corpus:
        by_dialect[u.dialect_id].append(u)

    for di, (dialect, utts) in enumerate(sorted(by_dialect.items())):
        if not utts:
            bank.warnings.append(f"dialect {dialect}: no utterances, skipped")
            continue
        rng = np.random.default_rng([seed, di])
        theta = init_prefix(cfg, rng)
        if cfg.prefix_length == 0:
            bank.prefixes[dialect] = theta
            continue
        flat = {f"l{l}.{n}": t for l, (pk, pv) in enumerate(theta) for n, t in (("k", pk), ("v", pv))}
        adam = m.AdamState(flat, 0.9, 0.999, 1e-8)
        labels = {u.id: vocab.encode(u.transcript) for u in utts}
        for _epoch in range(epochs):
            order = rng.permutation(len(utts))
            for b0 in range(0, len(utts), batch_size):
                batch = [utts[i] for i in order[b0:b0 + batch_size]]
                grads = {k: np.zeros_like(v, dtype=np.float64) for k, v in flat.items()}
                for u in batch:
                    entry = [(flat[f"l{l}.k"], flat[f"l{l}.v"]) for l in range(cfg.n_layers)]
                    logz, cache = m.forward(backbone, features[u.id], model_cfg,
                                            mode="train", prefix=entry, rng=rng)
                    loss, dlogz = ctc_loss(logz, labels[u.id])
                    if not np.isfinite(loss):
                        continue
                    norm = max(1, len(labels[u.id]))
                    _, pg = m.backward(backbone, model_cfg, cache, dlogz / norm)
                    for l, (gk, gv) in enumerate(pg):
                        grads[f"l{l}.k"] += gk
                        grads[f"l{l}.v"] += gv
                nb = max(1, len(batch))
                for k in grads:
                    grads[k] /= nb
                adam.step(flat, grads, lr, weight_decay=weight_decay)
        bank.prefixes[dialect] = [
            (flat[f"l{l}.k"], flat[f"l{l}.v"]) for l in range(cfg.n_layers)
        ]
    return bank


def decode_with_dialect(
    backbone: dict,
    model_cfg: m.ModelConfig,
    bank: PrefixBank,
    dialect_id: str,
    features: np.ndarray,
    vocab: CharVocab,
    lm=None,
    beam_width: int = 16,
    alpha: float = 0.5,
    beta: float = 0.0,
    n_best: int | None = None,
    fallback: bool = False,
) -> DialectDecodeResult:
    """Forward with the dialect's prefix in every layer, then beam-search."""
    if dialect_id in bank:
        entry = _prefix_or_none(bank.prefixes[dialect_id])
        used_fallback = False
    elif fallback:
        entry = None
        used_fallback = True
    else:
        raise KeyError(f"dialect {dialect_id!r} not in prefix bank and fallback disabled")
    logz, _ = m.forward(backbone, features, model_cfg, mode="eval", prefix=entry)
    nb = beam_search(logz, vocab, lm=lm, beam_width=beam_width,
                     alpha=alpha, beta=beta, n_best=n_best)
    return DialectDecodeResult(nbest=nb, dialect_fallback=used_fallback)


def save_prefix_bank(bank: PrefixBank, path) -> None:
    tensors = {}
    for dialect, entry in bank.prefixes.items():
        for l, (pk, pv) in enumerate(entry):
            tensors[f"{dialect}/l{l}.k"] = pk
            tensors[f"{dialect}/l{l}.v"] = pv
    meta = {
        "prefix_config": {
            "n_layers": bank.config.n_layers,
            "d_model": bank.config.d_model,
            "prefix_length": bank.config.prefix_length,
        },
        "dialects": sorted(bank.prefixes),
    }
    m.save_tensors(path, tensors, meta)


def load_prefix_bank(path) -> PrefixBank:
    tensors, meta = m.load_tensors(path)
    cfg = PrefixConfig(**meta["prefix_config"])
    bank = PrefixBank(config=cfg)
    for dialect in meta["dialects"]:
        bank.prefixes[dialect] = [
            (tensors[f"{dialect}/l{l}.k"], tensors[f"{dialect}/l{l}.v"])
            for l in range(cfg.n_layers)
        ]
    return bank
