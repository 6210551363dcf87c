import numpy as np
import pytest

from matryoshka3d.model import ModelConfig, init_model

TOY = dict(vocab_size=64, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=16,
           mel_rank=8, mel_rank_set=(4, 8), mll_layers=(1, 2), mrl_dims=(4, 16))


def toy_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TOY, **overrides})


def toy_weights(seed=0, dtype=np.float64, **overrides):
    """Toy model with unit-scale embeddings and perturbed norm gains."""
    cfg = toy_config(**overrides)
    rng = np.random.default_rng(1000 + seed)
    w = init_model(cfg, seed=seed, base_embedding=rng.normal(size=(cfg.vocab_size, cfg.d_model)), dtype=dtype)
    for layer in w.layers:
        layer.attn_norm.data = (1 + 0.1 * rng.normal(size=cfg.d_model)).astype(dtype)
        layer.ffn_norm.data = (1 + 0.1 * rng.normal(size=cfg.d_model)).astype(dtype)
    w.final_norm.data = (1 + 0.1 * rng.normal(size=cfg.d_model)).astype(dtype)
    return w


@pytest.fixture
def toy():
    return toy_weights()


@pytest.fixture
def small_desk():
    """Desk-default architecture with fewer layers, for quick integration tests."""
    return init_model(ModelConfig(n_layers=4, mll_layers=(1, 2, 4)), seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
