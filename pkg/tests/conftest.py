import numpy as np
import pytest

from aimkp.model import ModelConfig, Sample, init_model
from aimkp.model.params import EOS_ID


def tiny_config(seed=0, **kw):
    base = dict(
        visual_vocab=7,
        text_vocab=9,
        output_vocab=8,
        grid_height=4,
        grid_width=4,
        text_len=8,
        prompt=(1,),
        embed_dim=8,
        num_layers=2,
        num_heads=2,
        mlp_ratio=2,
        max_target_len=6,
        init_std=0.3,
        seed=seed,
    )
    base.update(kw)
    return ModelConfig(**base)


def random_sample(config, rng, sample_id="x", length=None):
    n = int(rng.integers(2, config.max_target_len + 1)) if length is None else length
    body = rng.integers(2, config.output_vocab, size=n - 1)
    return Sample(
        grid=rng.integers(0, config.visual_vocab, size=config.grid_shape),
        text=rng.integers(0, config.text_vocab, size=config.text_len),
        target=np.append(body, EOS_ID),
        sample_id=sample_id,
    )


def trained_like(config):
    """Init with a non-zero output head so gradients reach every block."""
    params = init_model(config)
    rng = np.random.default_rng([config.seed, 99])
    v = params.views()
    v["out.w"][...] = rng.normal(0, 0.3, v["out.w"].shape)
    v["out.b"][...] = rng.normal(0, 0.1, v["out.b"].shape)
    return params


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One verdict line per acceptance criterion, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
