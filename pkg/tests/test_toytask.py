from collections import Counter

import numpy as np

from casa_lab.model import FusionModel
from casa_lab.sequence import Text
from casa_lab.toytask import (DataConfig, PatchCodes, TrainConfig, Vocab, blind, evaluate, generate_dataset,
                              oracle_predictions, pack_examples, reference_model_config, train)


def test_patch_codes_small_grid_distinct():
    pc = PatchCodes.build(2, 2, 16, seed=0)
    codes = pc.table.reshape(-1, 16)
    assert codes.shape[0] == 8 and not pc.factorized
    assert len({tuple(np.round(c, 9)) for c in codes}) == 8


def test_patch_codes_factorized_when_wide():
    pc = PatchCodes.build(4, 8, 32, seed=0)
    assert pc.factorized and len({tuple(np.round(c, 9)) for c in pc.table.reshape(-1, 32)}) == 128


def test_generator_deterministic_and_shared_codes():
    cfg = DataConfig(n_windows=2)
    a = generate_dataset(cfg, 5, 32, seed=1)
    b = generate_dataset(cfg, 5, 32, seed=1)
    assert all(x.seq == y.seq for x, y in zip(a, b))
    c = generate_dataset(cfg, 5, 32, seed=2)
    assert a[0].seq != c[0].seq
    # the same (position, color) patch has the same code across splits
    assert np.array_equal(PatchCodes.build(4, 8, 32, cfg.code_seed).table,
                          PatchCodes.build(4, 8, 32, cfg.code_seed).table)


def test_label_balance_over_10k():
    cfg = DataConfig(n_windows=2, recall=False)
    ds = generate_dataset(cfg, 10_000, 24, seed=0)
    V = Vocab(cfg.grid, cfg.n_colors)
    colors = Counter(V.color_of(int(i)) for ex in ds for i in ex.answer_ids)
    first = Counter(int(ex.seq.events[0].token_id) for ex in ds)
    n = sum(colors.values())
    assert first == {V.BOS: 10_000}
    for c in range(cfg.n_colors):
        assert abs(colors[c] / n - 1 / cfg.n_colors) <= 0.02 / cfg.n_colors


def test_recall_follows_referent_and_oracle_is_perfect():
    cfg = DataConfig(n_windows=3)
    for ex in generate_dataset(cfg, 50, 32, seed=3):
        r = ex.qtypes.index("recall")
        assert all(p < ex.answer_pos[r] for p in ex.answer_pos[:r])
        assert np.array_equal(oracle_predictions(ex, cfg), ex.answer_ids)


def test_answer_positions_point_at_answer_tokens():
    ds = generate_dataset(DataConfig(delimiter=True), 10, 32, seed=0)
    seq, pos, ids, qts = pack_examples(ds)
    text = [e.token_id for e in seq.events if isinstance(e, Text)]
    assert [text[p + 1] for p in pos] == ids.tolist()
    assert len(seq.sample_boundaries) == 10 and set(qts) == {"color", "recall"}


def test_blind_zeroes_images():
    ex = blind(generate_dataset(DataConfig(), 2, 32, seed=0))
    assert all(not e.embeddings.any() for x in ex for e in x.seq.events if not isinstance(e, Text))


def tiny(data, **kw):
    return FusionModel(reference_model_config("casa-parallel", data, d_model=24, n_heads=2, n_layers=1, **kw),
                       seed=0)


def test_lr_zero_keeps_loss_constant():
    data = DataConfig(grid=2, n_colors=4)
    ds = generate_dataset(data, 1, 24, seed=0)
    m = tiny(data)
    before = {k: t.data.copy() for k, t in m.weights.items()}
    res = train(m, ds, TrainConfig(steps=5, lr=0.0, batch_samples=1, eval_every=1))
    losses = [r["loss"] for r in res.metrics]
    assert len(losses) == 5 and len(set(losses)) == 1
    assert all(np.array_equal(before[k], t.data) for k, t in m.weights.items())


def test_overfit_single_sample(tmp_path):
    data = DataConfig(grid=2, n_colors=4)
    ds = generate_dataset(data, 1, 24, seed=0)
    m = tiny(data, dtype="float64")
    res = train(m, ds, TrainConfig(steps=150, lr=1e-2, warmup=10, batch_samples=1, eval_every=50), ds,
                out_dir=tmp_path)
    assert res.status == "ok" and evaluate(m, ds) == {"color": 1.0, "recall": 1.0}
    assert (tmp_path / "metrics.csv").exists() and (tmp_path / "model.bin").exists()


def test_training_is_deterministic():
    data = DataConfig(grid=2, n_colors=4)
    ds = generate_dataset(data, 32, 24, seed=0)
    cfg = TrainConfig(steps=6, batch_samples=8, eval_every=2)
    a = train(tiny(data), ds, cfg, ds[:8]).metrics
    b = train(tiny(data), ds, cfg, ds[:8]).metrics
    assert a == b


def test_divergence_aborts_with_last_good_weights():
    data = DataConfig(grid=2, n_colors=4)
    ds = generate_dataset(data, 4, 24, seed=0)
    m = tiny(data)
    m.weights["lm_head"].data[0, 0] = np.nan
    res = train(m, ds, TrainConfig(steps=5, batch_samples=2))
    assert res.status == "diverged" and res.final_step == 0
