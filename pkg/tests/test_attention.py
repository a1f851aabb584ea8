import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from casa_lab import tensorkit as tk
from casa_lab.attention import (AttnWeights, MaskSpec, RopeParams, apply_rope, blockwise_attend,
                                build_ca_mask, build_casa_mask, build_insertion_mask, mha, rope_angles,
                                track_scratch)
from casa_lab.errors import ConfigError, ContractError
from casa_lab.sequence import parse_pattern, segment_windows
from casa_lab.tensorkit import Tensor
from casa_lab.verify import oracle_mask


def weights(rng, d, scale=0.3):
    return AttnWeights(*(Tensor(rng.standard_normal((d, d)) * scale) for _ in range(4)))


def lay(p):
    return segment_windows(parse_pattern(p))


patterns = st.lists(st.sampled_from(["T", "I1", "I2", "I3", "|"]), min_size=1, max_size=8).map(
    lambda toks: " ".join(t for i, t in enumerate(toks) if not (t == "|" and (i == 0 or toks[i - 1] == "|"))))


def clean(p):
    p = p.strip()
    while p.endswith("|"):
        p = p[:-1].strip()
    return p or "T"


def test_insertion_mask_examples():
    m = build_insertion_mask(lay("I2 T T")).to_dense()
    assert np.array_equal(m, np.tril(np.ones((4, 4), bool)))
    m = build_insertion_mask(lay("I1 T | T T")).to_dense()
    ref = np.zeros((4, 4), bool)
    ref[:2, :2] = np.tril(np.ones((2, 2), bool))
    ref[2:, 2:] = np.tril(np.ones((2, 2), bool))
    assert np.array_equal(m, ref)


def test_casa_mask_examples():
    m = build_casa_mask(lay("I2 T T")).to_dense()
    assert np.array_equal(m, [[1, 1, 1, 0], [1, 1, 1, 1]])
    spec = build_casa_mask(lay("T I1 T"))
    assert spec.zero_rows == (0,)
    assert not spec.to_dense()[0].any()


def test_ca_mask_examples():
    assert np.array_equal(build_ca_mask(lay("I2 T T")).to_dense(), [[1, 1, 0, 0], [1, 1, 0, 0]])
    assert build_ca_mask(lay("T I1 T")).zero_rows == (0,)


@given(patterns)
def test_masks_match_rule_oracle(p):
    seq = parse_pattern(clean(p))
    layout = segment_windows(seq)
    assert np.array_equal(build_casa_mask(layout).to_dense(), oracle_mask(seq, "casa"))
    assert np.array_equal(build_casa_mask(layout, "causal").to_dense(), oracle_mask(seq, "casa-causal"))
    assert np.array_equal(build_ca_mask(layout).to_dense(), oracle_mask(seq, "ca"))
    assert np.array_equal(build_insertion_mask(layout).to_dense(), oracle_mask(seq, "insertion"))


@given(patterns)
def test_casa_minus_text_columns_is_ca(p):
    layout = segment_windows(parse_pattern(clean(p)))
    casa = build_casa_mask(layout).to_dense()
    casa[:, layout.is_text] = False
    assert np.array_equal(casa, build_ca_mask(layout).to_dense())


def test_mask_csv_labels():
    buf = io.StringIO()
    build_casa_mask(lay("I2 T T")).dump_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",i0,i1,t0,t1" and lines[1] == "t0,1,1,1,0"


def test_rope_angles_and_identity(rng):
    assert np.allclose(rope_angles([1], RopeParams(4))[0], [1.0, 0.01])
    x = Tensor(rng.standard_normal((1, 2, 4)))
    assert np.array_equal(apply_rope(x, [0], RopeParams(4)).data, x.data)
    with pytest.raises(ConfigError):
        RopeParams(5)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(-20, 20))
def test_rope_relative_property(p1, p2, shift):
    rng = np.random.default_rng(p1 * 101 + p2)
    q, k = rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
    rp = RopeParams(8)

    def dot(a, b):
        return float((apply_rope(Tensor(q), [a], rp).data * apply_rope(Tensor(k), [b], rp).data).sum())

    s = max(p1 + shift, 0) - p1
    assert abs(dot(p1, p2) - dot(p1 + s, p2 + s)) < 1e-9


def test_single_query_returns_projected_value(rng):
    d = 4
    w = weights(rng, d)
    x = Tensor(rng.standard_normal((1, d)))
    out = mha(x, x, w, 1, MaskSpec(1, 1, dense=np.ones((1, 1), bool)))
    assert np.allclose(out.data, x.data @ w.wv.data @ w.wo.data, atol=1e-14)


def test_causal_row_zero_sees_only_key_zero(rng):
    d = 4
    w = weights(rng, d)
    x = rng.standard_normal((2, d))
    m = MaskSpec(2, 2, dense=np.tril(np.ones((2, 2), bool)))
    a = mha(Tensor(x), Tensor(x), w, 2, m).data
    x2 = x.copy()
    x2[1] += 5.0
    b = mha(Tensor(x2), Tensor(x2), w, 2, m).data
    assert np.allclose(a[0], b[0], atol=1e-14) and not np.allclose(a[1], b[1])


def test_fully_masked_row_is_contract_error(rng):
    w = weights(rng, 4)
    x = Tensor(rng.standard_normal((2, 4)))
    with pytest.raises(ContractError, match="row 1"):
        mha(x, x, w, 1, MaskSpec(2, 2, dense=np.array([[True, False], [False, False]])))


def per_row_oracle(xq, xkv, w, heads, mask):
    d = xq.shape[1]
    hd = d // heads
    q, k, v = xq @ w.wq.data, xkv @ w.wk.data, xkv @ w.wv.data
    out = np.zeros((xq.shape[0], d))
    for i in range(xq.shape[0]):
        keys = np.flatnonzero(mask[i])
        if not len(keys):
            continue
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            s = np.array([q[i, sl] @ k[j, sl] for j in keys]) / np.sqrt(hd)
            e = np.exp(s - s.max())
            out[i, sl] = (e / e.sum()) @ v[keys, sl]
    return out @ w.wo.data


@given(st.integers(0, 10_000))
def test_mha_matches_per_row_oracle(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((6, 6)) < 0.5
    m[np.arange(6), rng.integers(0, 6, 6)] = True
    w = weights(rng, 8)
    x = rng.standard_normal((6, 8))
    got = mha(Tensor(x), Tensor(x), w, 2, MaskSpec(6, 6, dense=m)).data
    assert np.abs(got - per_row_oracle(x, x, w, 2, m)).max() < 1e-10


def _compare(layout, rng, mask_fn, d=8, heads=2):
    w = weights(rng, d)
    xq = Tensor(rng.standard_normal((layout.flat_text_len, d)))
    xkv = Tensor(rng.standard_normal((layout.n_tokens, d)))
    mask = mask_fn(layout)
    rope = RopeParams(d // heads)
    qp = np.arange(layout.flat_text_len)
    kp = np.arange(layout.n_tokens)
    a = blockwise_attend(xq, xkv, w, heads, mask, rope, qp, kp).data
    b = mha(xq, xkv, w, heads, mask.materialize(), rope, qp, kp).data
    return np.abs(a - b).max(initial=0.0), a


@given(patterns, st.integers(0, 1000))
def test_blockwise_matches_dense(p, seed):
    rng = np.random.default_rng(seed)
    layout = segment_windows(parse_pattern(clean(p)))
    for fn in (build_casa_mask, build_ca_mask, lambda l: build_casa_mask(l, "causal")):
        err, _ = _compare(layout, rng, fn)
        assert err < 1e-10


def test_downscaled_table_shape_and_zero_rows(rng):
    layout = segment_windows(parse_pattern(("I16" + " T" * 5 + " ") * 4))
    err, _ = _compare(layout, rng, build_casa_mask)
    assert err < 1e-10
    err, out = _compare(segment_windows(parse_pattern("T T I2 T")), rng, build_casa_mask)
    assert err < 1e-10 and not out[:2].any()


def test_blockwise_scratch_bounded_by_window(rng):
    layout = segment_windows(parse_pattern(("I16" + " T" * 5 + " ") * 4))
    d, heads = 8, 2
    w = weights(rng, d)
    xq = Tensor(rng.standard_normal((layout.flat_text_len, d)))
    xkv = Tensor(rng.standard_normal((layout.n_tokens, d)))
    with track_scratch() as m:
        blockwise_attend(xq, xkv, w, heads, build_casa_mask(layout), max_group=1)
    assert m.peak <= heads * 5 * 21
    with track_scratch() as m2:
        mha(xq, xkv, w, heads, build_casa_mask(layout).materialize())
    assert m2.peak == heads * layout.flat_text_len * layout.n_tokens


def test_blockwise_mismatch_is_contract_error(rng):
    layout = lay("I2 T T")
    w = weights(rng, 4)
    with pytest.raises(ContractError):
        blockwise_attend(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 4))), w, 1, build_casa_mask(layout))


def test_blockwise_gradients_match_dense(rng):
    layout = lay("I2 T T I1 T")
    d = 4
    w = AttnWeights(*(Tensor(rng.standard_normal((d, d)) * 0.5, requires_grad=True) for _ in range(4)))
    xq = Tensor(rng.standard_normal((3, d)), requires_grad=True)
    xkv = Tensor(rng.standard_normal((6, d)), requires_grad=True)
    mask = build_casa_mask(layout)
    c = Tensor(rng.standard_normal((3, d)))
    grads = []
    for fn, m in ((blockwise_attend, mask), (mha, mask.materialize())):
        tk.backward(tk.tsum(fn(xq, xkv, w, 2, m) * c))
        grads.append([t.grad.copy() for t in (xq, xkv, w.wq, w.wk, w.wv, w.wo)])
    for a, b in zip(*grads):
        assert np.allclose(a, b, atol=1e-12)
