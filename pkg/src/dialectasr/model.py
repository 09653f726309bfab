"""Toy transformer encoder with a character-CTC head, trained from scratch
with manual backpropagation.

The encoder is pre-layernorm self-attention + FFN blocks with sinusoidal
positional encoding on the inputs.  Training supports the usual CTC
fine-tuning regularizers: SpecAugment on the input features, LayerDrop,
and a classifier-only warmup phase.  Per-dialect prefix key/value tensors
(see the prefix module) can be injected as extra attention slots; their
gradients come out of the same backward pass.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .ctc import CharVocab, ctc_loss, greedy_decode
from .score import wer as corpus_wer

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "SpecAugmentConfig",
    "init_params",
    "forward",
    "backward",
    "spec_augment",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    dropout_p: float = 0.0
    layerdrop_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.feature_dim, self.vocab_size, self.d_model,
               self.n_layers, self.n_heads, self.ffn_dim) < 1:
            raise ValueError("all dimensions must be >= 1")


@dataclass(frozen=True)
class SpecAugmentConfig:
    time_mask_p: float = 0.5
    channel_mask_p: float = 0.1
    channel_mask_len: int = 64


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    warmup_classifier_updates: int = 0
    batch_size: int = 4
    epochs: int = 10
    spec_augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    use_spec_augment: bool = False
    lr_warmup_frac: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


LN_EPS = 1e-5


def _posenc(t_max: int, d: int, dtype) -> np.ndarray:
    pos = np.arange(t_max, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return pe.astype(dtype)


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, F, V, ff = cfg.d_model, cfg.feature_dim, cfg.vocab_size, cfg.ffn_dim

    def mat(rows, cols):
        scale = math.sqrt(2.0 / (rows + cols))
        return (scale * rng.standard_normal((rows, cols))).astype(dtype)

    p: dict[str, np.ndarray] = {
        "in.W": mat(F, d),
        "in.b": np.zeros(d, dtype=dtype),
        "lnf.g": np.ones(d, dtype=dtype),
        "lnf.b": np.zeros(d, dtype=dtype),
        "cls.W": mat(d, V),
        "cls.b": np.zeros(V, dtype=dtype),
    }
    for l in range(cfg.n_layers):
        p[f"l{l}.ln1.g"] = np.ones(d, dtype=dtype)
        p[f"l{l}.ln1.b"] = np.zeros(d, dtype=dtype)
        p[f"l{l}.Wq"] = mat(d, d)
        p[f"l{l}.Wk"] = mat(d, d)
        p[f"l{l}.Wv"] = mat(d, d)
        p[f"l{l}.Wo"] = mat(d, d)
        p[f"l{l}.ln2.g"] = np.ones(d, dtype=dtype)
        p[f"l{l}.ln2.b"] = np.zeros(d, dtype=dtype)
        p[f"l{l}.W1"] = mat(d, ff)
        p[f"l{l}.b1"] = np.zeros(ff, dtype=dtype)
        p[f"l{l}.W2"] = mat(ff, d)
        p[f"l{l}.b2"] = np.zeros(d, dtype=dtype)
    return p


def _layernorm(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    y = xc * inv
    return y * g + b, (y, inv)


def _layernorm_backward(dout, cache, g):
    y, inv = cache
    dg = (dout * y).sum(axis=0)
    db = dout.sum(axis=0)
    dy = dout * g
    dx = inv * (dy - dy.mean(axis=1, keepdims=True)
                - y * (dy * y).mean(axis=1, keepdims=True))
    return dx, dg, db


def forward(
    params: dict,
    features: np.ndarray,
    cfg: ModelConfig,
    mode: str = "eval",
    prefix=None,
    rng: np.random.Generator | None = None,
):
    """Run the encoder; returns (row-log-softmaxed logits T x V, cache).

    prefix: optional list of (keys, values) per layer, each L x d_model,
    prepended as extra attention key/value slots (no queries, no positional
    encoding; prefix outputs never exist).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"bad mode {mode!r}")
    train = mode == "train"
    if train and (cfg.dropout_p > 0 or cfg.layerdrop_p > 0) and rng is None:
        raise ValueError("train mode with stochastic regularizers needs an rng")
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[1] != cfg.feature_dim:
        raise ValueError(f"features shape {x.shape} != (T, {cfg.feature_dim})")
    dtype = params["in.W"].dtype
    x = x.astype(dtype)
    T = x.shape[0]
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    scale = 1.0 / math.sqrt(dh)

    x = x @ params["in.W"] + params["in.b"] + _posenc(T, d, dtype)
    cache = {"features": features, "T": T, "layers": [], "mode": mode, "prefix": prefix}

    for l in range(cfg.n_layers):
        dropped = bool(train and cfg.layerdrop_p > 0 and rng.random() < cfg.layerdrop_p)
        if dropped:
            cache["layers"].append({"dropped": True})
            continue
        lc: dict = {"dropped": False, "x_in": x}
        h, ln1c = _layernorm(x, params[f"l{l}.ln1.g"], params[f"l{l}.ln1.b"])
        q = (h @ params[f"l{l}.Wq"]).reshape(T, H, dh).transpose(1, 0, 2)
        k = (h @ params[f"l{l}.Wk"]).reshape(T, H, dh).transpose(1, 0, 2)
        v = (h @ params[f"l{l}.Wv"]).reshape(T, H, dh).transpose(1, 0, 2)
        if prefix is not None:
            pk, pv = prefix[l]
            L = pk.shape[0]
            pk_h = pk.astype(dtype).reshape(L, H, dh).transpose(1, 0, 2)
            pv_h = pv.astype(dtype).reshape(L, H, dh).transpose(1, 0, 2)
            K = np.concatenate([pk_h, k], axis=1)
            V_ = np.concatenate([pv_h, v], axis=1)
        else:
            L = 0
            K, V_ = k, v
        S = np.einsum("hid,hjd->hij", q, K) * scale
        S = S - S.max(axis=2, keepdims=True)
        e = np.exp(S)
        A = e / e.sum(axis=2, keepdims=True)
        O = np.einsum("hij,hjd->hid", A, V_)
        O2 = O.transpose(1, 0, 2).reshape(T, d)
        attn = O2 @ params[f"l{l}.Wo"]
        if train and cfg.dropout_p > 0:
            m1 = (rng.random(attn.shape) >= cfg.dropout_p) / (1.0 - cfg.dropout_p)
            attn = attn * m1.astype(dtype)
            lc["drop1"] = m1
        x = x + attn
        lc.update(h=h, ln1c=ln1c, q=q, K=K, V=V_, A=A, O2=O2, L=L)

        lc["x_mid"] = x
        h2, ln2c = _layernorm(x, params[f"l{l}.ln2.g"], params[f"l{l}.ln2.b"])
        u_pre = h2 @ params[f"l{l}.W1"] + params[f"l{l}.b1"]
        u = np.maximum(u_pre, 0)
        f = u @ params[f"l{l}.W2"] + params[f"l{l}.b2"]
        if train and cfg.dropout_p > 0:
            m2 = (rng.random(f.shape) >= cfg.dropout_p) / (1.0 - cfg.dropout_p)
            f = f * m2.astype(dtype)
            lc["drop2"] = m2
        x = x + f
        lc.update(h2=h2, ln2c=ln2c, u=u)
        cache["layers"].append(lc)

    hf, lnfc = _layernorm(x, params["lnf.g"], params["lnf.b"])
    z = hf @ params["cls.W"] + params["cls.b"]
    logz = z - _logsumexp_rows(z)
    cache.update(x_final=x, hf=hf, lnfc=lnfc, softmax=np.exp(logz))
    return logz, cache


def _logsumexp_rows(z):
    m = z.max(axis=1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def backward(params: dict, cfg: ModelConfig, cache: dict, d_logits: np.ndarray):
    """Gradients of all parameters (and prefix tensors, if any were used)
    given the upstream gradient w.r.t. the log-softmax output.

    Returns (param_grads, prefix_grads) where prefix_grads is None or a list
    of (d_keys, d_values) per layer.
    """
    T = cache["T"]
    if d_logits.shape[0] != T:
        raise ValueError("cache/logits mismatch")
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    scale = 1.0 / math.sqrt(dh)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    prefix = cache["prefix"]
    pgrads = None
    if prefix is not None:
        pgrads = [(np.zeros_like(pk), np.zeros_like(pv)) for pk, pv in prefix]

    # log-softmax backward
    dz = d_logits - cache["softmax"] * d_logits.sum(axis=1, keepdims=True)
    grads["cls.W"] += cache["hf"].T @ dz
    grads["cls.b"] += dz.sum(axis=0)
    dhf = dz @ params["cls.W"].T
    dx, dg, db = _layernorm_backward(dhf, cache["lnfc"], params["lnf.g"])
    grads["lnf.g"] += dg
    grads["lnf.b"] += db

    for l in range(cfg.n_layers - 1, -1, -1):
        lc = cache["layers"][l]
        if lc["dropped"]:
            continue
        # FFN sublayer
        df = dx.copy()
        if "drop2" in lc:
            df = df * lc["drop2"]
        grads[f"l{l}.W2"] += lc["u"].T @ df
        grads[f"l{l}.b2"] += df.sum(axis=0)
        du = df @ params[f"l{l}.W2"].T
        du = du * (lc["u"] > 0)
        grads[f"l{l}.W1"] += lc["h2"].T @ du
        grads[f"l{l}.b1"] += du.sum(axis=0)
        dh2 = du @ params[f"l{l}.W1"].T
        dx_mid, dg, db = _layernorm_backward(dh2, lc["ln2c"], params[f"l{l}.ln2.g"])
        grads[f"l{l}.ln2.g"] += dg
        grads[f"l{l}.ln2.b"] += db
        dx = dx + dx_mid

        # attention sublayer
        dattn = dx.copy()
        if "drop1" in lc:
            dattn = dattn * lc["drop1"]
        grads[f"l{l}.Wo"] += lc["O2"].T @ dattn
        dO2 = dattn @ params[f"l{l}.Wo"].T
        dO = dO2.reshape(T, H, dh).transpose(1, 0, 2)
        A, K, V_, q = lc["A"], lc["K"], lc["V"], lc["q"]
        dA = np.einsum("hid,hjd->hij", dO, V_)
        dV = np.einsum("hij,hid->hjd", A, dO)
        dS = A * (dA - (dA * A).sum(axis=2, keepdims=True))
        dq = np.einsum("hij,hjd->hid", dS, K) * scale
        dK = np.einsum("hij,hid->hjd", dS, q) * scale
        L = lc["L"]
        if L:
            dpk = dK[:, :L].transpose(1, 0, 2).reshape(L, d)
            dpv = dV[:, :L].transpose(1, 0, 2).reshape(L, d)
            gk, gv = pgrads[l]
            gk += dpk
            gv += dpv
        dk = dK[:, L:]
        dv = dV[:, L:]
        dq_f = dq.transpose(1, 0, 2).reshape(T, d)
        dk_f = dk.transpose(1, 0, 2).reshape(T, d)
        dv_f = dv.transpose(1, 0, 2).reshape(T, d)
        h = lc["h"]
        grads[f"l{l}.Wq"] += h.T @ dq_f
        grads[f"l{l}.Wk"] += h.T @ dk_f
        grads[f"l{l}.Wv"] += h.T @ dv_f
        dh_ = dq_f @ params[f"l{l}.Wq"].T + dk_f @ params[f"l{l}.Wk"].T + dv_f @ params[f"l{l}.Wv"].T
        dx_in, dg, db = _layernorm_backward(dh_, lc["ln1c"], params[f"l{l}.ln1.g"])
        grads[f"l{l}.ln1.g"] += dg
        grads[f"l{l}.ln1.b"] += db
        dx = dx + dx_in

    grads["in.W"] += np.asarray(cache["features"], dtype=dx.dtype).T @ dx
    grads["in.b"] += dx.sum(axis=0)
    return grads, pgrads


# ---------------------------------------------------------------------------
# SpecAugment


def spec_augment(
    features: np.ndarray,
    time_mask_p: float = 0.5,
    channel_mask_p: float = 0.1,
    channel_mask_len: int = 64,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Zero random timesteps (Bernoulli per step) and random runs of
    consecutive channels (Bernoulli start per channel)."""
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.array(features, copy=True)
    T, F = x.shape
    if time_mask_p > 0:
        mask = rng.random(T) < time_mask_p
        x[mask, :] = 0.0
    if channel_mask_p > 0:
        starts = np.nonzero(rng.random(F) < channel_mask_p)[0]
        for s in starts:
            x[:, s:s + channel_mask_len] = 0.0
    return x


# ---------------------------------------------------------------------------
# Training


class AdamState:
    def __init__(self, params: dict, beta1, beta2, eps):
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, weight_decay: float = 0.0,
             trainable=None):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1 ** self.t
        bc2 = 1 - b2 ** self.t
        for k in params:
            if trainable is not None and k not in trainable:
                continue
            g = grads[k].astype(np.float64)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            if weight_decay:
                update = update + weight_decay * params[k].astype(np.float64)
            params[k] = (params[k].astype(np.float64) - lr * update).astype(params[k].dtype)


def apply_freeze(grads: dict, trainable) -> dict:
    """Zero gradients of frozen tensors; trainable is a set of names."""
    return {k: (g if k in trainable else np.zeros_like(g)) for k, g in grads.items()}


def train(
    corpus,
    features: dict,
    config: TrainConfig,
    model_config: ModelConfig,
    vocab: CharVocab,
    dev_corpus=None,
    dev_features: dict | None = None,
    params: dict | None = None,
):
    """CTC-train the encoder; returns (params, per-epoch dev WER trace).

    features maps utterance id to its (T, F) feature matrix.  Fully
    deterministic for a fixed TrainConfig seed.
    """
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(model_config)
    adam = AdamState(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    utts = list(corpus)
    labels = {u.id: vocab.encode(u.transcript) for u in utts}
    steps_per_epoch = math.ceil(len(utts) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    warm = max(1, int(config.lr_warmup_frac * total_steps))
    classifier_only = {"cls.W", "cls.b"}
    all_names = set(params)
    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(utts))
        epoch_loss = 0.0
        epoch_n = 0
        for b0 in range(0, len(utts), config.batch_size):
            batch = [utts[i] for i in order[b0:b0 + config.batch_size]]
            grads = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
            batch_loss = 0.0
            for u in batch:
                feats = features[u.id]
                if config.use_spec_augment:
                    sa = config.spec_augment
                    feats = spec_augment(feats, sa.time_mask_p, sa.channel_mask_p,
                                         sa.channel_mask_len, rng)
                logz, cache = forward(params, feats, model_config, mode="train", rng=rng)
                loss, dlogz = ctc_loss(logz, labels[u.id])
                if not np.isfinite(loss):
                    continue  # too-short utterance for its label; skip
                norm = max(1, len(labels[u.id]))
                g, _ = backward(params, model_config, cache, dlogz / norm)
                for k in grads:
                    grads[k] += g[k]
                batch_loss += loss / norm
            if not np.isfinite(batch_loss):
                raise RuntimeError(f"training diverged at step {step} (loss={batch_loss})")
            nb = max(1, len(batch))
            for k in grads:
                grads[k] /= nb
            lr = _lr_at(step, warm, total_steps, config.learning_rate)
            trainable = classifier_only if step < config.warmup_classifier_updates else all_names
            grads = apply_freeze(grads, trainable)
            adam.step(params, grads, lr, trainable=trainable)
            step += 1
            epoch_loss += batch_loss
            epoch_n += len(batch)
        entry = {"epoch": epoch, "loss": epoch_loss / max(1, epoch_n)}
        if dev_corpus is not None and dev_features is not None:
            refs, hyps = [], []
            for u in dev_corpus:
                logz, _ = forward(params, dev_features[u.id], model_config, mode="eval")
                refs.append(list(u.transcript))
                hyps.append(list(greedy_decode(logz, vocab)))
            entry["dev_wer"] = corpus_wer(refs, hyps)
        trace.append(entry)
    return params, trace


def _lr_at(step: int, warm: int, total: int, peak: float) -> float:
    if step < warm:
        return peak * (step + 1) / warm
    rest = max(1, total - warm)
    return peak * max(0.0, 1.0 - (step - warm) / rest)


# ---------------------------------------------------------------------------
# Checkpoint container (binary, named tensor sections, embedded JSON config)

_CKPT_MAGIC = b"CKP1"
_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            t = tensors[name]
            nb = name.encode()
            code = _DTYPE_CODES[np.dtype(t.dtype)]
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, t.ndim))
            for s in t.shape:
                f.write(struct.pack("<I", s))
            f.write(np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (n,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(n).decode())
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            dt = np.dtype(_DTYPES[code])
            size = dt.itemsize * int(np.prod(shape)) if shape else dt.itemsize
            data = f.read(size)
            tensors[name] = np.frombuffer(data, dtype=dt).reshape(shape).copy()
    return tensors, meta


def save_checkpoint(params: dict, config: ModelConfig, path, extra_meta: dict | None = None) -> None:
    meta = {"model_config": asdict(config)}
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, params, meta)


def load_checkpoint(path, expect_config: ModelConfig | None = None):
    tensors, meta = load_tensors(path)
    cfg = ModelConfig(**meta["model_config"])
    if expect_config is not None and cfg != expect_config:
        raise CheckpointError(f"{path}: checkpoint config {cfg} != expected {expect_config}")
    reference = init_params(cfg)
    for k, v in reference.items():
        if k not in tensors or tensors[k].shape != v.shape:
            raise CheckpointError(f"{path}: tensor {k} missing or wrong shape")
    return {k: tensors[k] for k in reference}, cfg
