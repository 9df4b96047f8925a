"""Refinement stage: conditional denoising diffusion over the radar field.

The denoiser predicts the noise added to the (normalized) radar field and is
conditioned on the coarse estimate, the raw observation stack and two
wavelet-derived feature maps: a transform of the approximation band and a
transform of the aggregated detail bands, both at half resolution. Diffusion
runs in pixel space by default; a residual mode (diffusing target minus
coarse estimate) sits behind a flag.

Sampling supports the full ancestral chain and a strided deterministic
sampler for desk-scale inference; both are bitwise-reproducible under a
seeded generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .errors import TrainingDivergedError, ValidationError
from .losses import FiblConfig, stage2_loss
from .wavelet import DEFAULT_BASIS, aggregate_high, dwt2
from .wtformer import ResBlock2D, _groups, _zero_init

LINEAR = "linear"
COSINE = "cosine"


@dataclass
class NoiseSchedule:
    """Beta table and derived cumulative products, indexed by t in [1, T]."""

    kind: str
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or len(self.betas) < 1:
            raise ValidationError("betas must be a non-empty 1D table")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValidationError("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValidationError("alpha_bar must be strictly decreasing")

    @property
    def t_steps(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.t_steps:
            raise ValidationError(f"t={t} outside [1, {self.t_steps}]")
        return t

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t) - 1])

    def abar_prev(self, t: int) -> float:
        t = self._check_t(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def posterior_variance(self, t: int) -> float:
        t = self._check_t(t)
        return self.beta(t) * (1.0 - self.abar_prev(t)) / (1.0 - self.abar(t))

    @classmethod
    def linear(cls, t_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02):
        if t_steps < 1:
            raise ValidationError(f"t_steps must be >= 1, got {t_steps}")
        return cls(LINEAR, np.linspace(beta_start, beta_end, t_steps))

    @classmethod
    def cosine(cls, t_steps: int, s: float = 0.008, max_beta: float = 0.999):
        if t_steps < 1:
            raise ValidationError(f"t_steps must be >= 1, got {t_steps}")

        def abar_fn(u: float) -> float:
            return math.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2

        betas = [
            min(1.0 - abar_fn((i + 1) / t_steps) / abar_fn(i / t_steps), max_beta)
            for i in range(t_steps)
        ]
        return cls(COSINE, np.array(betas))

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        return cls("custom", np.asarray(betas, dtype=np.float64))

    @classmethod
    def from_config(cls, dcfg) -> "NoiseSchedule":
        if dcfg.schedule == LINEAR:
            return cls.linear(dcfg.t_steps, dcfg.beta_start, dcfg.beta_end)
        if dcfg.schedule == COSINE:
            return cls.cosine(dcfg.t_steps)
        raise ValidationError(f"unknown schedule kind {dcfg.schedule!r}")


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> Tensor:
    """Forward noising z_t = sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps.

    ``t`` may be a scalar or a 1D tensor of per-sample steps matching the
    batch axis of ``x0``.
    """
    x0 = torch.as_tensor(x0)
    eps = torch.as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValidationError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if np.ndim(t) == 0:
        abar = schedule.abar(int(t))
        return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps
    t = np.asarray(t)
    if t.ndim != 1 or len(t) != x0.shape[0]:
        raise ValidationError("per-sample t must be 1D with one entry per batch item")
    abar = torch.tensor(
        [schedule.abar(int(ti)) for ti in t], dtype=x0.dtype, device=x0.device
    ).reshape(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def predict_x0(z_t, t, eps_hat, schedule: NoiseSchedule) -> Tensor:
    """Invert the forward closed form: x0_hat = (z_t - sqrt(1-abar)*eps)/sqrt(abar)."""
    if np.ndim(t) == 0:
        abar = schedule.abar(int(t))
        return (z_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
    abar = torch.tensor(
        [schedule.abar(int(ti)) for ti in np.asarray(t)],
        dtype=z_t.dtype,
        device=z_t.device,
    ).reshape(-1, *([1] * (z_t.ndim - 1)))
    return (z_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)


@dataclass
class DiffusionState:
    """The evolving sample of the reverse chain."""

    z: Tensor
    t: int


@dataclass
class ConditioningBundle:
    """Everything the denoiser sees besides the noisy sample and the step."""

    mu: Tensor  # (B, 1, H, W) coarse estimate
    stack: Tensor  # (B, C, H, W) observations
    f_lf: Tensor  # (B, M, H/2, W/2) low-frequency prior
    f_hf: Tensor  # (B, M, H/2, W/2) high-frequency prior


class FreqFeatureExtractor(nn.Module):
    """Wavelet frequency priors for conditioning.

    Decomposes the stack per channel, aggregates the detail bands, and runs
    each domain through conv -> GELU -> depthwise conv -> conv at half
    resolution.
    """

    def __init__(self, in_channels: int, width: int = 16, basis: str = DEFAULT_BASIS):
        super().__init__()
        self.basis = basis

        def branch():
            return nn.Sequential(
                nn.Conv2d(in_channels, width, 3, padding=1),
                nn.GELU(),
                nn.Conv2d(width, width, 3, padding=1, groups=width),
                nn.Conv2d(width, width, 3, padding=1),
            )

        self.low_branch = branch()
        self.high_branch = branch()

    def decompose(self, stack: Tensor) -> tuple[Tensor, Tensor]:
        pyr = dwt2(stack, self.basis)
        return pyr.ll, aggregate_high(pyr)

    def forward(self, stack: Tensor) -> tuple[Tensor, Tensor]:
        f_low, f_high = self.decompose(stack)
        return self.low_branch(f_low), self.high_branch(f_high)


class TimeEmbedding(nn.Module):
    """Sinusoidal step embedding followed by a two-layer MLP."""

    def __init__(self, dim: int = 64):
        super().__init__()
        if dim % 2:
            raise ValidationError(f"time embedding dim must be even, got {dim}")
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
        )
        args = t.float()[:, None] * freqs[None]
        return self.mlp(torch.cat([torch.sin(args), torch.cos(args)], dim=-1))


class Denoiser(nn.Module):
    """Small two-level conditional UNet predicting the added noise.

    Full-resolution conditioning enters by channel concatenation of
    [z_t, mu, stack]; the frequency priors are concatenated at the
    half-resolution encoder level. ``use_hlf=False`` drops the priors.
    """

    def __init__(
        self,
        stack_channels: int = 4,
        widths: tuple[int, int] = (32, 64),
        cond_width: int = 16,
        temb_dim: int = 64,
        use_hlf: bool = True,
    ):
        super().__init__()
        w1, w2 = widths
        self.use_hlf = use_hlf
        self.stack_channels = stack_channels
        self.temb = TimeEmbedding(temb_dim)
        self.stem = nn.Conv2d(1 + 1 + stack_channels, w1, 3, padding=1)
        self.enc1 = ResBlock2D(w1, w1, temb_dim=temb_dim)
        self.down1 = ResBlock2D(w1, w2, "down", temb_dim=temb_dim)
        inject = 2 * cond_width if use_hlf else 0
        self.fuse_cond = nn.Conv2d(w2 + inject, w2, 1) if use_hlf else nn.Identity()
        self.enc2 = ResBlock2D(w2, w2, temb_dim=temb_dim)
        self.down2 = ResBlock2D(w2, w2, "down", temb_dim=temb_dim)
        self.mid = ResBlock2D(w2, w2, temb_dim=temb_dim)
        self.up1 = ResBlock2D(w2, w2, "up", temb_dim=temb_dim)
        self.fuse1 = nn.Conv2d(2 * w2, w2, 1)
        self.dec2 = ResBlock2D(w2, w2, temb_dim=temb_dim)
        self.up2 = ResBlock2D(w2, w1, "up", temb_dim=temb_dim)
        self.fuse2 = nn.Conv2d(2 * w1, w1, 1)
        self.dec1 = ResBlock2D(w1, w1, temb_dim=temb_dim)
        self.head_norm = nn.GroupNorm(_groups(w1), w1)
        self.head = _zero_init(nn.Conv2d(w1, 1, 3, padding=1))

    def forward(self, z_t: Tensor, cond: ConditioningBundle, t) -> Tensor:
        if z_t.ndim != 4 or z_t.shape[1] != 1:
            raise ValidationError(f"z_t must be (B, 1, H, W), got {tuple(z_t.shape)}")
        b, _, h, w = z_t.shape
        if h % 4 or w % 4:
            raise ValidationError(f"grid ({h}, {w}) must be divisible by 4")
        if cond.mu.shape != z_t.shape:
            raise ValidationError(
                f"mu shape {tuple(cond.mu.shape)} != z_t shape {tuple(z_t.shape)}"
            )
        if cond.stack.shape[0] != b or cond.stack.shape[-2:] != (h, w):
            raise ValidationError("stack not aligned with z_t")
        if np.ndim(t) == 0:
            t = torch.full((b,), int(t), dtype=torch.float32, device=z_t.device)
        else:
            t = torch.as_tensor(np.asarray(t), dtype=torch.float32, device=z_t.device)
            if t.shape != (b,):
                raise ValidationError("per-sample t must have one entry per batch item")
        emb = self.temb(t)

        x = self.stem(torch.cat([z_t, cond.mu, cond.stack], dim=1))
        e1 = self.enc1(x, emb)
        h1 = self.down1(e1, emb)
        if self.use_hlf:
            if cond.f_lf.shape[-2:] != h1.shape[-2:]:
                raise ValidationError(
                    f"frequency priors at {tuple(cond.f_lf.shape[-2:])} do not match "
                    f"half resolution {tuple(h1.shape[-2:])}"
                )
            h1 = self.fuse_cond(torch.cat([h1, cond.f_lf, cond.f_hf], dim=1))
        e2 = self.enc2(h1, emb)
        m = self.mid(self.down2(e2, emb), emb)
        u1 = self.fuse1(torch.cat([self.up1(m, emb), e2], dim=1))
        f1 = self.dec2(u1, emb)
        u2 = self.fuse2(torch.cat([self.up2(f1, emb), e1], dim=1))
        f2 = self.dec1(u2, emb)
        return self.head(nn.functional.gelu(self.head_norm(f2)))


class Stage2Model(nn.Module):
    """Frequency-feature extractor plus conditional denoiser."""

    def __init__(
        self,
        stack_channels: int = 4,
        widths: tuple[int, int] = (32, 64),
        cond_width: int = 16,
        basis: str = DEFAULT_BASIS,
        use_hlf: bool = True,
    ):
        super().__init__()
        self.use_hlf = use_hlf
        self.extractor = FreqFeatureExtractor(stack_channels, cond_width, basis)
        self.denoiser = Denoiser(
            stack_channels=stack_channels,
            widths=widths,
            cond_width=cond_width,
            use_hlf=use_hlf,
        )

    def condition(self, mu: Tensor, stack: Tensor) -> ConditioningBundle:
        f_lf, f_hf = self.extractor(stack)
        return ConditioningBundle(mu=mu, stack=stack, f_lf=f_lf, f_hf=f_hf)

    def forward(self, z_t: Tensor, cond: ConditioningBundle, t) -> Tensor:
        return self.denoiser(z_t, cond, t)


def build_stage2(cfg) -> Stage2Model:
    return Stage2Model(
        stack_channels=4 if cfg.model.use_vis else 3,
        widths=tuple(cfg.diffusion.widths),
        cond_width=cfg.diffusion.cond_width,
        basis=cfg.model.basis,
        use_hlf=cfg.diffusion.use_hlf,
    )


def p_sample_step(
    state: DiffusionState,
    cond: ConditioningBundle,
    schedule: NoiseSchedule,
    model,
    generator: torch.Generator | None = None,
) -> DiffusionState:
    """One ancestral reverse step t -> t-1 with the fixed posterior variance.

    ``model`` is any callable (z_t, cond, t) -> eps_hat, which lets tests
    drive the chain with an oracle denoiser. No noise is added at t = 1.
    """
    t = state.t
    if t < 1:
        raise ValidationError(f"p_sample_step needs t >= 1, got {t}")
    schedule._check_t(t)
    with torch.no_grad():
        eps_hat = model(state.z, cond, t)
    beta = schedule.beta(t)
    abar = schedule.abar(t)
    alpha = 1.0 - beta
    mean = (state.z - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return DiffusionState(z=mean, t=0)
    sigma = math.sqrt(schedule.posterior_variance(t))
    noise = torch.empty_like(state.z).normal_(generator=generator)
    return DiffusionState(z=mean + sigma * noise, t=t - 1)


def ddim_steps(t_steps: int, n: int) -> list[int]:
    """Strided, descending subsequence of [1, T] always containing both ends."""
    if n < 1:
        raise ValidationError(f"sampler steps must be >= 1, got {n}")
    n = min(n, t_steps)
    taus = np.unique(np.linspace(1, t_steps, n).round().astype(int))
    return list(taus[::-1])


def ddim_sample(
    model, cond: ConditioningBundle, schedule: NoiseSchedule, z_start: Tensor, steps: int
) -> Tensor:
    """Deterministic strided sampler (no noise beyond the starting z)."""
    z = z_start
    taus = ddim_steps(schedule.t_steps, steps)
    with torch.no_grad():
        for i, t in enumerate(taus):
            eps_hat = model(z, cond, t)
            x0_hat = predict_x0(z, t, eps_hat, schedule)
            if i + 1 < len(taus):
                abar_next = schedule.abar(taus[i + 1])
                z = math.sqrt(abar_next) * x0_hat + math.sqrt(1.0 - abar_next) * eps_hat
            else:
                z = x0_hat
    return z


def reverse_chain(
    model,
    cond: ConditioningBundle,
    schedule: NoiseSchedule,
    shape,
    generator: torch.Generator | None = None,
    steps: int | None = None,
) -> Tensor:
    """Run the reverse process from unit-normal noise down to a sample."""
    z = torch.empty(shape).normal_(generator=generator)
    if steps is not None and steps < schedule.t_steps:
        return ddim_sample(model, cond, schedule, z, steps)
    state = DiffusionState(z=z, t=schedule.t_steps)
    while state.t > 0:
        state = p_sample_step(state, cond, schedule, model, generator)
    return state.z


def refine(
    mu: Tensor,
    stack: Tensor,
    model: Stage2Model,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    steps: int | None = 50,
    residual: bool = False,
) -> Tensor:
    """Full Stage-II inference: conditioning, reverse chain, clamp to [0, 1]."""
    if mu.ndim != 4 or mu.shape[1] != 1:
        raise ValidationError(f"mu must be (B, 1, H, W), got {tuple(mu.shape)}")
    model.eval()
    with torch.no_grad():
        cond = model.condition(mu, stack)
        sample = reverse_chain(model, cond, schedule, mu.shape, generator, steps)
        y = from_diffusion_space(sample, mu, residual)
    return torch.clamp(y, 0.0, 1.0)


def draw_timesteps(rng: np.random.Generator, t_steps: int, n: int) -> np.ndarray:
    """Uniform step draws on [1, T], exactly as the trainer consumes them."""
    return rng.integers(1, t_steps + 1, size=n)


# The chain runs over an affine recoding of the normalized radar field:
# [0, 1] maps to [-1, 1] (residual mode: 2*(y - mu)), which balances the
# signal scale against the unit-variance noise the sampler starts from.


def to_diffusion_space(y: Tensor, mu: Tensor, residual: bool) -> Tensor:
    return 2.0 * (y - mu) if residual else 2.0 * y - 1.0


def from_diffusion_space(x: Tensor, mu: Tensor, residual: bool) -> Tensor:
    return mu + 0.5 * x if residual else 0.5 * (x + 1.0)


@dataclass
class Stage2StepRecord:
    step: int
    loss: float
    diff: float
    wavelet: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "loss": self.loss,
            "diff": self.diff,
            "wavelet": self.wavelet,
        }


def train_stage2(records, stage1_model, cfg, diag_path=None):
    """Train the refinement stage against a frozen coarse model.

    Returns (model, history). The coarse estimates are precomputed once with
    the frozen Stage-I parameters; each step draws a batch, a per-sample
    uniform timestep and unit noise, forms z_t, and optimizes the combined
    noise-prediction plus frequency-consistency loss.
    """
    records = list(records)
    if not records:
        raise ValidationError("training needs at least one record")
    from .data import to_tensors

    x, y = to_tensors(records, use_vis=cfg.model.use_vis)
    stage1_model.eval()
    with torch.no_grad():
        mu = stage1_model(x)

    torch.manual_seed(cfg.run.seed + 1)
    model = build_stage2(cfg)
    schedule = NoiseSchedule.from_config(cfg.diffusion)
    from .wtformer import resolve_fibl_config

    fibl_cfg = resolve_fibl_config(cfg, targets=[y[i, 0] for i in range(y.shape[0])])

    lr = cfg.diffusion.lr if cfg.diffusion.lr is not None else cfg.run.lr
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    batch_rng = np.random.default_rng([cfg.run.seed, 3])
    t_rng = np.random.default_rng([cfg.run.seed, 4])
    noise_gen = torch.Generator().manual_seed(cfg.run.seed + 5)

    residual = cfg.diffusion.residual
    x0_all = (y - mu) if residual else y
    history: list[Stage2StepRecord] = []

    for step in range(cfg.run.steps):
        idx = batch_rng.integers(0, x.shape[0], size=min(cfg.run.batch_size, x.shape[0]))
        xb, yb, mub, x0b = x[idx], y[idx], mu[idx], x0_all[idx]
        t = draw_timesteps(t_rng, schedule.t_steps, len(idx))
        eps = torch.empty_like(x0b).normal_(generator=noise_gen)
        z_t = q_sample(x0b, t, eps, schedule)
        cond = model.condition(mub, xb)
        eps_hat = model(z_t, cond, t)
        x0_hat = predict_x0(z_t, t, eps_hat, schedule)
        refined = mub + x0_hat if residual else x0_hat
        parts = stage2_loss(eps_hat, eps, refined, yb, cfg.loss.lambda_freq, fibl_cfg)
        if not torch.isfinite(parts.total):
            if diag_path is not None:
                from .checkpoint import save_checkpoint

                save_checkpoint(diag_path, "stage2", model, cfg.to_dict(), step)
            raise TrainingDivergedError(
                f"non-finite stage-2 loss at step {step}"
                + (f"; diagnostic checkpoint at {diag_path}" if diag_path else "")
            )
        opt.zero_grad()
        parts.total.backward()
        nn.utils.clip_grad_norm_(model.parameters(), cfg.run.grad_clip)
        opt.step()
        history.append(
            Stage2StepRecord(
                step=step,
                loss=float(parts.total.detach()),
                diff=float(parts.diff.detach()),
                wavelet=float(parts.wavelet.detach()),
            )
        )
    return model, history
