import hashlib

import numpy as np
import pytest

from dialectasr import model as M
from dialectasr import prefix as P
from dialectasr.ctc import CharVocab

from test_model import tiny_task, toy_cfg


def params_digest(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# parameter counting


def test_count_matches_large_encoder_figure():
    # length-4 prefixes on a 48-layer, 1280-wide encoder: the advertised
    # ~500K adapter size
    cfg = P.PrefixConfig(n_layers=48, d_model=1280, prefix_length=4)
    assert P.count_prefix_params(cfg) == 491_520


def test_count_zero_length():
    assert P.count_prefix_params(P.PrefixConfig(n_layers=48, d_model=1280, prefix_length=0)) == 0


def test_count_minimal():
    assert P.count_prefix_params(P.PrefixConfig(n_layers=1, d_model=128, prefix_length=4)) == 1024


def test_negative_length_rejected():
    with pytest.raises(ValueError):
        P.PrefixConfig(n_layers=1, d_model=8, prefix_length=-1)


def test_init_prefix_shapes_and_scale():
    cfg = P.PrefixConfig(n_layers=3, d_model=64, prefix_length=4)
    rng = np.random.default_rng(0)
    theta = P.init_prefix(cfg, rng)
    assert len(theta) == 3
    flat = np.concatenate([t.ravel() for pair in theta for t in pair])
    assert flat.shape[0] == P.count_prefix_params(cfg)
    assert abs(float(flat.std()) - P.PREFIX_INIT_STD) < 0.005


# ---------------------------------------------------------------------------
# apply_prefix contract


def test_apply_prefix_rows_and_attention_normalization():
    rng = np.random.default_rng(1)
    T, d, L, H = 5, 8, 3, 2
    q, k, v = (rng.standard_normal((T, d)) for _ in range(3))
    pk, pv = rng.standard_normal((L, d)), rng.standard_normal((L, d))
    out, attn = P.apply_prefix(q, k, v, pk, pv, n_heads=H)
    assert out.shape == (T, d)
    assert attn.shape == (H, T, L + T)
    assert np.allclose(attn.sum(axis=2), 1.0, atol=1e-12)


def test_apply_prefix_large_negative_keys_vanish():
    rng = np.random.default_rng(2)
    T, d, L = 4, 8, 2
    # positive queries guarantee q . pk is hugely negative for every row
    q = np.abs(rng.standard_normal((T, d))) + 0.1
    k, v = rng.standard_normal((T, d)), rng.standard_normal((T, d))
    pk = np.full((L, d), -1e4)
    pv = rng.standard_normal((L, d))
    out, attn = P.apply_prefix(q, k, v, pk, pv, n_heads=2)
    base, _ = P.apply_prefix(q, k, v, np.zeros((0, d)), np.zeros((0, d)), n_heads=2)
    assert np.allclose(attn[:, :, :L], 0.0, atol=1e-12)
    assert np.allclose(out, base, atol=1e-9)


def test_apply_prefix_shape_mismatch():
    with pytest.raises(ValueError):
        P.apply_prefix(np.zeros((2, 8)), np.zeros((2, 8)), np.zeros((2, 8)),
                       np.zeros((1, 6)), np.zeros((1, 6)), n_heads=2)


# ---------------------------------------------------------------------------
# forward integration


def test_zero_length_prefix_bitwise_identical_to_backbone():
    cfg = toy_cfg()
    params = M.init_params(cfg)
    x = np.random.default_rng(3).standard_normal((6, cfg.feature_dim))
    pcfg = P.PrefixConfig(n_layers=cfg.n_layers, d_model=cfg.d_model, prefix_length=0)
    theta = P.init_prefix(pcfg, np.random.default_rng(0))
    with_pfx, _ = M.forward(params, x, cfg, prefix=theta)
    without, _ = M.forward(params, x, cfg, prefix=None)
    assert with_pfx.tobytes() == without.tobytes()


def test_nonzero_prefix_changes_output():
    cfg = toy_cfg()
    params = M.init_params(cfg)
    x = np.random.default_rng(4).standard_normal((6, cfg.feature_dim))
    pcfg = P.PrefixConfig(n_layers=cfg.n_layers, d_model=cfg.d_model, prefix_length=4)
    theta = [(pk * 50, pv * 50) for pk, pv in P.init_prefix(pcfg, np.random.default_rng(1))]
    with_pfx, _ = M.forward(params, x, cfg, prefix=theta)
    without, _ = M.forward(params, x, cfg, prefix=None)
    assert not np.allclose(with_pfx, without)


# ---------------------------------------------------------------------------
# training


def prefix_setup(n_dialects=2, seed=0):
    utts, feats, vocab = tiny_task(n_utts=8, seed=seed)
    relabeled = []
    for i, u in enumerate(utts):
        relabeled.append(type(u)(id=u.id, speaker_id=u.speaker_id,
                                 dialect_id=f"d{i % n_dialects}",
                                 transcript=u.transcript, audio_path=u.audio_path))
    mcfg = M.ModelConfig(feature_dim=5, vocab_size=len(vocab), d_model=8,
                         n_layers=1, n_heads=2, ffn_dim=16, seed=9)
    backbone = M.init_params(mcfg)
    return relabeled, feats, vocab, mcfg, backbone


def test_train_prefixes_backbone_untouched_one_prefix_per_dialect():
    utts, feats, vocab, mcfg, backbone = prefix_setup()
    digest = params_digest(backbone)
    pcfg = P.PrefixConfig(n_layers=1, d_model=8, prefix_length=2)
    bank = P.train_prefixes(backbone, mcfg, utts, feats, vocab, pcfg,
                            batch_size=4, epochs=1, seed=5)
    assert params_digest(backbone) == digest
    assert sorted(bank.prefixes) == ["d0", "d1"]
    init0 = P.init_prefix(pcfg, np.random.default_rng([5, 0]))
    assert not np.array_equal(bank.prefixes["d0"][0][0], init0[0][0])


def test_train_prefixes_deterministic():
    utts, feats, vocab, mcfg, backbone = prefix_setup()
    pcfg = P.PrefixConfig(n_layers=1, d_model=8, prefix_length=2)
    b1 = P.train_prefixes(backbone, mcfg, utts, feats, vocab, pcfg, epochs=1, seed=7)
    b2 = P.train_prefixes(backbone, mcfg, utts, feats, vocab, pcfg, epochs=1, seed=7)
    for d in b1.prefixes:
        for (k1, v1), (k2, v2) in zip(b1.prefixes[d], b2.prefixes[d]):
            assert np.array_equal(k1, k2) and np.array_equal(v1, v2)


def test_train_prefixes_epoch_cap():
    utts, feats, vocab, mcfg, backbone = prefix_setup()
    pcfg = P.PrefixConfig(n_layers=1, d_model=8, prefix_length=2)
    with pytest.raises(ValueError):
        P.train_prefixes(backbone, mcfg, utts, feats, vocab, pcfg, epochs=3)


def test_train_prefixes_config_mismatch():
    utts, feats, vocab, mcfg, backbone = prefix_setup()
    pcfg = P.PrefixConfig(n_layers=2, d_model=8, prefix_length=2)
    with pytest.raises(ValueError):
        P.train_prefixes(backbone, mcfg, utts, feats, vocab, pcfg)


# ---------------------------------------------------------------------------
# decoding


def test_decode_unknown_dialect_raises_or_falls_back():
    utts, feats, vocab, mcfg, backbone = prefix_setup()
    pcfg = P.PrefixConfig(n_layers=1, d_model=8, prefix_length=2)
    bank = P.PrefixBank(config=pcfg)
    x = feats[utts[0].id]
    with pytest.raises(KeyError):
        P.decode_with_dialect(backbone, mcfg, bank, "dX", x, vocab)
    res = P.decode_with_dialect(backbone, mcfg, bank, "dX", x, vocab, fallback=True)
    assert res.dialect_fallback is True
    assert len(res.nbest.hypotheses) >= 1


def test_decode_known_dialect_uses_prefix():
    utts, feats, vocab, mcfg, backbone = prefix_setup()
    pcfg = P.PrefixConfig(n_layers=1, d_model=8, prefix_length=2)
    bank = P.train_prefixes(backbone, mcfg, utts, feats, vocab, pcfg, epochs=1, seed=1)
    res = P.decode_with_dialect(backbone, mcfg, bank, "d0", feats[utts[0].id], vocab)
    assert res.dialect_fallback is False


# ---------------------------------------------------------------------------
# persistence


def test_prefix_bank_round_trip(tmp_path):
    utts, feats, vocab, mcfg, backbone = prefix_setup()
    pcfg = P.PrefixConfig(n_layers=1, d_model=8, prefix_length=2)
    bank = P.train_prefixes(backbone, mcfg, utts, feats, vocab, pcfg, epochs=1, seed=2)
    path = tmp_path / "bank.ckp"
    P.save_prefix_bank(bank, path)
    loaded = P.load_prefix_bank(path)
    assert loaded.config == pcfg
    assert sorted(loaded.prefixes) == sorted(bank.prefixes)
    for d in bank.prefixes:
        for (k1, v1), (k2, v2) in zip(bank.prefixes[d], loaded.prefixes[d]):
            assert np.array_equal(k1, k2) and np.array_equal(v1, v2)
