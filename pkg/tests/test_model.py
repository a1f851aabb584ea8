import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from casa_lab import tensorkit as tk
from casa_lab.errors import ConfigError, ContractError
from casa_lab.model import (CASA_MODES, MODES, FusionConfig, FusionModel, QFormerConfig,
                            count_flops_and_params, count_params, load_checkpoint, save_checkpoint)
from casa_lab.probes import randomize_weights
from casa_lab.sequence import ImageBlock, MultimodalSequence, Text, parse_pattern
from casa_lab.tensorkit import Tensor
from casa_lab.verify import text_backbone

FUSION_MODES = MODES[1:]


def small(mode, **kw):
    base = dict(d_model=16, n_heads=2, n_layers=3, vocab_size=12, mode=mode, period=2)
    base.update(kw)
    m = FusionModel(FusionConfig(**base), seed=3)
    randomize_weights(m, 5, 0.05)
    return m


def seq(p, seed=0):
    return parse_pattern(p, 16, seed, token_ids=[(3 * i + 1) % 12 for i in range(64)])


def text_only(s):
    return MultimodalSequence(tuple(e for e in s.events if isinstance(e, Text)))


def test_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig(mode="nope")
    with pytest.raises(ConfigError):
        FusionConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        FusionConfig.from_dict({"d_model": 16, "bogus": 1})
    cfg = FusionConfig(mode="casa-replace", n_layers=8, period=4)
    assert cfg.replaced_layers() == (1, 5)
    assert FusionConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("mode", FUSION_MODES)
@pytest.mark.parametrize("ffnu", [False, True])
def test_zero_image_input_is_text_backbone(mode, ffnu):
    m = FusionModel(FusionConfig(d_model=16, n_heads=2, n_layers=3, vocab_size=12, mode=mode,
                                 period=2, image_ffn_update=ffnu), seed=1)
    s = MultimodalSequence(tuple(Text(i % 12) for i in range(9)), (0, 4))
    assert np.array_equal(m.logits(s), text_backbone(m).logits(s))


def test_gate_zero_removes_cross_attention():
    m = small("gated-ca")
    for k, t in m.weights.items():
        if k.endswith("x.gate"):
            t.data[:] = 0.0
    s = seq("I3 T T I2 T T")
    assert np.array_equal(m.logits(s), text_backbone(m).logits(text_only(s)))


def test_position_counts():
    s = parse_pattern("I2 T T", 16, 0, [1, 2])
    ins = small("insertion").prepare(s)
    assert ins.layout.n_tokens == 4
    from casa_lab.attention import text_positions
    assert list(text_positions(small("casa-parallel").prepare(s).layout)) == [0, 1]


@pytest.mark.parametrize("mode", MODES)
def test_dense_and_blockwise_forward_agree(mode):
    m = small(mode)
    s = seq("T I3 T T I2 I1 T | I2 T T")
    assert np.abs(m.logits(s) - m.logits(s, dense=True)).max() < 1e-10


@pytest.mark.parametrize("mode", MODES)
def test_causality_and_sample_isolation(mode):
    m = small(mode)
    base = seq("I2 T T T I3 T T | I1 T T")
    ref = m.logits(base)
    ev = list(base.events)
    ev[3] = Text((ev[3].token_id + 5) % 12)       # third text token
    out = m.logits(MultimodalSequence(tuple(ev), base.sample_boundaries))
    assert np.array_equal(out[:2], ref[:2]) and not np.allclose(out[2], ref[2])
    assert np.array_equal(out[5:], ref[5:])       # later sample untouched


@pytest.mark.parametrize("mode", CASA_MODES + ("ca", "gated-ca"))
def test_window_isolation(mode):
    m = small(mode)
    if mode == "gated-ca":
        for k, t in m.weights.items():
            if k.endswith("x.gate"):
                t.data[:] = 0.7
    base = seq("I2 T T I3 T T")
    ev = list(base.events)
    ev[3] = ImageBlock.of(ev[3].embeddings + np.random.default_rng(9).standard_normal((3, 16)))
    out = m.logits(MultimodalSequence(tuple(ev)))
    ref = m.logits(base)
    assert np.array_equal(out[:2], ref[:2]) and not np.allclose(out[2:], ref[2:])


def test_image_tokens_bypass_ffn_unless_updated():
    s = seq("I3 T T")
    for ffnu in (False, True):
        m = small("casa-pre", image_ffn_update=ffnu)
        with tk.count_macs() as c:
            m.logits(s)
        ffn = 2 * 16 * 64 * 3
        assert c.by_tag["ffn"] == ffn * (2 + (3 if ffnu else 0))


def test_qformer_rows_and_identity_case():
    m = FusionModel(FusionConfig(d_model=8, n_heads=2, n_layers=1, vocab_size=8,
                                 qformer=QFormerConfig(64)), seed=0)
    assert m.qformer_compress(Tensor(np.random.default_rng(0).standard_normal((1024, 8)))).shape == (64, 8)
    m32 = FusionModel(FusionConfig(d_model=8, n_heads=2, n_layers=1, vocab_size=8,
                                   qformer=QFormerConfig(32)), seed=0)
    assert m32.qformer_compress(Tensor(np.ones((5, 8)))).shape == (32, 8)
    with pytest.raises(ContractError):
        m32.qformer_compress(Tensor(np.zeros((0, 8))))

    # one query, one token, identity projections, FFN off, query vector zero
    m1 = FusionModel(FusionConfig(d_model=4, n_heads=1, n_layers=1, vocab_size=4,
                                  qformer=QFormerConfig(1)), seed=0)
    W = m1.weights
    for k in ("wq", "wk", "wv", "wo"):
        W[f"qformer.0.{k}"].data = np.eye(4)
    for k in ("w2", "b2"):
        W[f"qformer.0.{k}"].data[:] = 0
    W["qformer.queries"].data[:] = 0
    W["qformer.0.lnkv.g"].data[:] = 1
    x = np.array([[1.0, -1.0, 2.0, 0.0]])
    out = m1.qformer_compress(Tensor(x)).data
    ln = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    assert np.allclose(out, ln @ W["qformer.0.wv"].data, atol=1e-12)


def test_qformer_compresses_each_image():
    m = small("casa-parallel", qformer=QFormerConfig(4))
    prep = m.prepare(seq("I7 T I2 T"))
    assert [w.n_image for w in prep.layout.windows] == [4, 4]


def test_checkpoint_round_trip(tmp_path):
    m = small("gated-ca", dtype="float32")
    save_checkpoint(tmp_path / "ck", m.cfg, m.weights, {"note": 1})
    cfg, w, extra = load_checkpoint(tmp_path / "ck")
    assert cfg == m.cfg and extra == {"note": 1}
    for k in m.weights:
        assert np.array_equal(w[k].data, m.weights[k].data)
    s = seq("I2 T T")
    assert np.array_equal(FusionModel(cfg, w).logits(s), m.logits(s))
    man = json.loads((tmp_path / "ck.json").read_text())
    del man["version"]
    (tmp_path / "ck.json").write_text(json.dumps(man))
    with pytest.raises(ConfigError, match="version"):
        load_checkpoint(tmp_path / "ck")


def test_weights_mode_mismatch():
    w = small("casa-parallel").weights
    with pytest.raises(ConfigError):
        FusionModel(FusionConfig(d_model=16, n_heads=2, n_layers=3, vocab_size=12, mode="insertion"), w)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("qf", [False, True])
def test_flop_count_matches_instrumented(mode, qf):
    m = small(mode, image_ffn_update=True, qformer=QFormerConfig(3) if qf else None)
    s = seq("T I4 T T I2 T | I5 T")
    with tk.count_macs() as c:
        m.logits(s)
    assert count_flops_and_params(m.cfg, s).total_macs == c.total


@given(st.integers(1, 40))
def test_ffn_macs_vs_image_tokens(n):
    for mode in MODES:
        cfg = FusionConfig(d_model=16, n_heads=2, n_layers=2, vocab_size=12, mode=mode, period=2)
        a = count_flops_and_params(cfg, parse_pattern(f"I{n} T T T")).totals["ffn"]
        b = count_flops_and_params(cfg, parse_pattern(f"I{n + 1} T T T")).totals["ffn"]
        if mode == "insertion":
            assert b - a == 2 * 2 * 16 * 64
        else:
            assert a == b


def test_added_param_ratio_orders():
    cfg = FusionConfig(d_model=2048, n_heads=16, n_layers=28, vocab_size=48000, ffn_mult=6,
                       mode="casa-parallel", dtype="float32")
    pc = count_params(cfg)
    assert 0.10 <= pc["added"] / pc["backbone"] <= 0.30
    assert count_params(FusionConfig(mode="casa-replace", n_layers=4, period=2))["added"] == 0
