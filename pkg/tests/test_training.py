import math
from itertools import islice

import numpy as np
import pytest
from conftest import toy_config, toy_weights

from matryoshka3d.deploy import load_checkpoint, save_model
from matryoshka3d.errors import NumericalError, ParameterError, UsageError
from matryoshka3d.evaluation import SynthTaskSpec, generate_synthetic_task
from matryoshka3d.model import ModelWeights, init_model
from matryoshka3d.objective import LossConfig
from matryoshka3d.tensor import Tensor
from matryoshka3d.training import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    last_checkpoints,
    merge_checkpoints,
    train,
)

SMALL = dict(vocab_size=512, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=16,
             mel_rank=8, mel_rank_set=(4, 8), mll_layers=(1, 2), mrl_dims=(4, 16))


def one_param(x):
    return {"x": Tensor(np.array([x], dtype=np.float64))}


def step(x, g, **cfg):
    params = one_param(x)
    state = OptimizerState.zeros_like(params)
    adamw_step(params, {"x": np.array([g])}, state, TrainConfig(**cfg))
    return params["x"].data[0], state


def test_adamw_decay_only():
    x, _ = step(2.0, 0.0, lr=0.1, weight_decay=0.5)
    assert x == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def test_adamw_no_decay_no_grad():
    x, state = step(2.0, 0.0, lr=0.1, weight_decay=0.0)
    assert x == 2.0 and state.step == 1


def test_adamw_first_step_on_square():
    # d/dx x^2 at 1 is 2; the bias-corrected step moves by lr * sign
    x, _ = step(1.0, 2.0, lr=0.1, weight_decay=0.0)
    assert x == pytest.approx(0.9, abs=1e-6)


def test_adamw_rejects_non_finite():
    params = one_param(1.0)
    with pytest.raises(NumericalError):
        adamw_step(params, {"x": np.array([np.nan])}, OptimizerState.zeros_like(params), TrainConfig())


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == 5.0
    assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)
    small = {"a": np.array([0.3])}
    clip_grad_norm(small, 1.0)
    assert small["a"][0] == 0.3


def test_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(lr=0)
    with pytest.raises(ParameterError):
        TrainConfig(merge_window=0)


@pytest.fixture(scope="module")
def task():
    return generate_synthetic_task(SynthTaskSpec(n_clusters=4, docs_per_cluster=8, words_per_cluster=16))


def data(task, n):
    return list(islice(task.training_samples(seed=1, n_hard=3), n))


def small_model(seed=0):
    return init_model(toy_config(**SMALL), seed=seed)


def run(task, steps, seed=0, **kw):
    w = small_model()
    cfg = TrainConfig(max_steps=steps, batch_size=4, seed=seed, **kw)
    return train(w, data(task, 4 * steps), cfg, LossConfig.for_model(w.config, n_hard_negatives=3))


def assert_same(a: ModelWeights, b: ModelWeights):
    pa, pb = a.named_parameters(), b.named_parameters()
    assert list(pa) == list(pb)
    for k in pa:
        assert np.array_equal(pa[k].data, pb[k].data), k


def test_zero_steps_leaves_weights(task):
    w = small_model()
    res = train(w, data(task, 8), TrainConfig(max_steps=0), LossConfig.for_model(w.config, n_hard_negatives=3))
    assert res.history == []
    assert_same(res.weights, w)


def test_history_and_input_untouched(task):
    w = small_model()
    before = {k: t.data.copy() for k, t in w.named_parameters().items()}
    res = train(w, data(task, 20), TrainConfig(max_steps=5, batch_size=4),
                LossConfig.for_model(w.config, n_hard_negatives=3))
    assert [h["step"] for h in res.history] == [1, 2, 3, 4, 5]
    assert all(h["rank"] in (4, 8) for h in res.history)
    for k, t in w.named_parameters().items():
        assert np.array_equal(t.data, before[k])


def test_data_exhaustion_stops_early(task):
    res = run(task, 3)
    w = small_model()
    short = train(w, data(task, 8), TrainConfig(max_steps=10, batch_size=4),
                  LossConfig.for_model(w.config, n_hard_negatives=3))
    assert len(res.history) == 3 and len(short.history) == 2


def test_smoke_training_reduces_loss(task):
    res = run(task, 200)
    losses = [h["loss"] for h in res.history]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_determinism(task):
    a, b = run(task, 6, seed=3), run(task, 6, seed=3)
    assert_same(a.weights, b.weights)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]


def test_checkpoint_resume_matches_uninterrupted(task, tmp_path):
    w = small_model()
    samples = data(task, 40)
    loss_cfg = LossConfig.for_model(w.config, n_hard_negatives=3)
    full = train(w, samples, TrainConfig(max_steps=8, batch_size=4, seed=2), loss_cfg)
    first = train(w, samples, TrainConfig(max_steps=4, batch_size=4, seed=2, checkpoint_interval=2),
                  loss_cfg, checkpoint_dir=tmp_path, log_path=tmp_path / "loss.log")
    assert [p.name for p in first.checkpoints] == ["step_0000002.m3d", "step_0000004.m3d"]
    assert last_checkpoints(tmp_path, 1) == [tmp_path / "step_0000004.m3d"]
    ck = load_checkpoint(tmp_path / "step_0000004.m3d")
    restored = OptimizerState.from_tensors(ck.extra_tensors, 4)
    for k, m in first.optimizer.m.items():
        assert np.array_equal(restored.m[k], m) and np.array_equal(restored.v[k], first.optimizer.v[k])
    resumed = train(w, samples, TrainConfig(max_steps=8, batch_size=4, seed=2), loss_cfg,
                    resume=tmp_path / "step_0000004.m3d")
    assert [h["step"] for h in resumed.history] == [5, 6, 7, 8]
    assert_same(resumed.weights, full.weights)
    rows = (tmp_path / "loss.log").read_text().splitlines()
    assert len(rows) == 4 and rows[0].split("\t")[:2] == ["1", "1"]


def test_resume_needs_train_state(task, tmp_path):
    w = small_model()
    save_model(w, tmp_path / "plain.m3d")
    with pytest.raises(UsageError):
        train(w, data(task, 8), TrainConfig(max_steps=1), LossConfig.for_model(w.config, n_hard_negatives=3),
              resume=tmp_path / "plain.m3d")


def test_merge_identical_is_exact(tmp_path):
    w = toy_weights(dtype=np.float32)
    paths = []
    for i in range(5):
        paths.append(tmp_path / f"{i}.m3d")
        save_model(w, paths[-1])
    assert_same(merge_checkpoints(paths), w)


def test_merge_zero_and_w(tmp_path):
    w = toy_weights()
    zero = ModelWeights.from_named(w.config, {k: Tensor(np.zeros_like(t.data)) for k, t in w.named_parameters().items()})
    save_model(zero, tmp_path / "z.m3d")
    save_model(w, tmp_path / "w.m3d")
    merged = merge_checkpoints([tmp_path / "z.m3d", tmp_path / "w.m3d"]).named_parameters()
    for k, t in w.named_parameters().items():
        np.testing.assert_array_equal(merged[k].data, t.data / 2)


def test_merge_matches_scalar_loop(tmp_path):
    models = [toy_weights(seed=s) for s in range(5)]
    paths = []
    for i, m in enumerate(models):
        paths.append(tmp_path / f"{i}.m3d")
        save_model(m, paths[-1])
    merged = merge_checkpoints(paths).named_parameters()
    for name in merged:
        flat = [m.named_parameters()[name].data.ravel() for m in models]
        got = merged[name].data.ravel()
        for j in range(got.size):
            total = 0.0
            for f in flat:
                total += float(f[j])
            assert abs(got[j] - total / 5) <= 1e-12


def test_merge_rejects_mismatch(tmp_path):
    save_model(toy_weights(), tmp_path / "a.m3d")
    save_model(toy_weights(d_ff=48), tmp_path / "b.m3d")
    with pytest.raises(UsageError):
        merge_checkpoints([tmp_path / "a.m3d", tmp_path / "b.m3d"])
    with pytest.raises(UsageError):
        merge_checkpoints([])
