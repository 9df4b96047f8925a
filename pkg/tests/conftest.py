import numpy as np
import pytest
import torch

from sat2rad import data as data_mod
from sat2rad.config import RunConfig


def tiny_config(seed: int = 0) -> RunConfig:
    cfg = RunConfig()
    cfg.data.height = cfg.data.width = 16
    cfg.data.n_events = 8
    cfg.data.seed = seed
    cfg.model.widths = (4, 8)
    cfg.model.heads = 2
    cfg.model.window = 4
    cfg.diffusion.widths = (8, 16)
    cfg.diffusion.cond_width = 8
    cfg.diffusion.t_steps = 100
    cfg.diffusion.sampler_steps = 20
    cfg.run.seed = seed
    cfg.run.steps = 30
    cfg.run.batch_size = 4
    cfg.run.lr = 1e-3
    return cfg


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def records16():
    spec = data_mod.SyntheticStormSpec(seed=0, height=16, width=16)
    return [data_mod.normalize(r) for r in data_mod.generate_synthetic(spec, 8)]


@pytest.fixture(scope="session")
def toy_pipeline(records16):
    """A briefly trained two-stage toy model shared across tests."""
    from sat2rad.diffusion import train_stage2
    from sat2rad.wtformer import train_stage1

    cfg = tiny_config()
    cfg.run.steps = 40
    model1, hist1, _ = train_stage1(records16, cfg)
    cfg2 = tiny_config()
    cfg2.run.steps = 60
    model2, hist2 = train_stage2(records16, model1, cfg2)
    return {
        "cfg": cfg,
        "cfg2": cfg2,
        "records": records16,
        "stage1": model1,
        "stage2": model2,
        "hist1": hist1,
        "hist2": hist2,
    }


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(98765)
