"""Two-stage satellite-to-radar retrieval.

Stage I estimates a coarse radar field from a multi-channel satellite
observation stack with a wavelet-attention encoder-decoder trained under
frequency-decomposed losses; Stage II refines it with a conditional denoising
diffusion model guided by wavelet frequency priors. A verification suite
(CSI, HSS, pooled CSI, SSIM) and a synthetic storm generator make the whole
pipeline testable at desk scale.
"""

from .config import RunConfig
from .data import (
    EventRecord,
    SyntheticStormSpec,
    denormalize,
    generate_synthetic,
    load_archive,
    load_tensor,
    normalize,
    save_tensor,
    split,
    write_fixture,
)
from .diffusion import (
    ConditioningBundle,
    Denoiser,
    DiffusionState,
    FreqFeatureExtractor,
    NoiseSchedule,
    Stage2Model,
    p_sample_step,
    q_sample,
    refine,
    train_stage2,
)
from .losses import (
    FiblConfig,
    ScheduleState,
    alpha_from_energy,
    fgl,
    fibl,
    schedule_select,
    stage2_loss,
)
from .metrics import (
    VIL_THRESHOLDS,
    ConfusionCounts,
    MetricReport,
    confusion,
    csi,
    hss,
    pooled_csi,
    report,
    ssim,
)
from .wavelet import (
    WaveletPyramid,
    aggregate_high,
    dwt2,
    idwt2,
    selective_reconstruct,
)
from .wtformer import WTFormer, WtfBlock, WindowedSelfAttention, WthlAttention, train_stage1

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "EventRecord",
    "SyntheticStormSpec",
    "denormalize",
    "generate_synthetic",
    "load_archive",
    "load_tensor",
    "normalize",
    "save_tensor",
    "split",
    "write_fixture",
    "ConditioningBundle",
    "Denoiser",
    "DiffusionState",
    "FreqFeatureExtractor",
    "NoiseSchedule",
    "Stage2Model",
    "p_sample_step",
    "q_sample",
    "refine",
    "train_stage2",
    "FiblConfig",
    "ScheduleState",
    "alpha_from_energy",
    "fgl",
    "fibl",
    "schedule_select",
    "stage2_loss",
    "VIL_THRESHOLDS",
    "ConfusionCounts",
    "MetricReport",
    "confusion",
    "csi",
    "hss",
    "pooled_csi",
    "report",
    "ssim",
    "WaveletPyramid",
    "aggregate_high",
    "dwt2",
    "idwt2",
    "selective_reconstruct",
    "WTFormer",
    "WtfBlock",
    "WindowedSelfAttention",
    "WthlAttention",
    "train_stage1",
    "__version__",
]
