"""Coarse-stage estimator: a two-level encoder-decoder over the observation
stack producing the coarse radar field.

Each level combines a residual conv block, windowed multi-head self-attention
(a single-frame stand-in for spatiotemporal cuboid attention: the retrieval
here is per-frame, so attention windows are purely spatial) and the WTF block,
whose wavelet pathway runs cross-frequency attention with low-frequency
queries against high-frequency keys before an inverse transform restores full
resolution.

All residual pathways end in zero-initialized projections, so every block is
an exact identity at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .errors import TrainingDivergedError, ValidationError
from .losses import (
    FGL,
    FiblConfig,
    ScheduleState,
    alpha_from_energy,
    cosine_weight,
    fgl,
    fibl,
    schedule_select,
)
from .wavelet import DEFAULT_BASIS, WaveletPyramid, aggregate_high, dwt2, idwt2


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


def _zero_init(module: nn.Module) -> nn.Module:
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


class WindowedSelfAttention(nn.Module):
    """Multi-head self-attention within non-overlapping square windows.

    Tokens in different windows never interact, which keeps cost linear in
    the number of windows; with window == H == W this is full attention.
    """

    def __init__(self, channels: int, heads: int = 4, window: int = 8):
        super().__init__()
        if channels % heads:
            raise ValidationError(f"channels {channels} not divisible by heads {heads}")
        if window < 1:
            raise ValidationError(f"window must be >= 1, got {window}")
        self.channels = channels
        self.heads = heads
        self.window = window
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = _zero_init(nn.Linear(channels, channels))

    def forward(self, x: Tensor, return_attn: bool = False):
        b, c, h, w = x.shape
        wn = self.window
        if c != self.channels:
            raise ValidationError(f"expected {self.channels} channels, got {c}")
        if h % wn or w % wn:
            raise ValidationError(f"grid ({h}, {w}) not divisible by window {wn}")
        nh, nw = h // wn, w // wn
        d = c // self.heads

        # (B, C, H, W) -> (B*nh*nw, wn*wn, C) window tokens
        t = x.reshape(b, c, nh, wn, nw, wn).permute(0, 2, 4, 3, 5, 1)
        t = t.reshape(b * nh * nw, wn * wn, c)
        q, k, v = self.qkv(t).chunk(3, dim=-1)

        def split_heads(u):
            return u.reshape(u.shape[0], u.shape[1], self.heads, d).transpose(1, 2)

        q, k, v = split_heads(q), split_heads(k), split_heads(v)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b * nh * nw, wn * wn, c)
        out = self.proj(out)
        out = out.reshape(b, nh, nw, wn, wn, c).permute(0, 5, 1, 3, 2, 4)
        out = out.reshape(b, c, h, w)
        if return_attn:
            return out, attn
        return out


class WthlAttention(nn.Module):
    """Cross-frequency attention between wavelet sub-band grids.

    The input is decomposed per channel; the approximation band supplies the
    queries, the aggregated detail bands the keys, and both domains supply
    values gathered by the shared attention weights. The combined result is
    projected onto four sub-bands and inverse-transformed back to full
    resolution.
    """

    def __init__(self, channels: int, heads: int = 4, basis: str = DEFAULT_BASIS):
        super().__init__()
        if channels % heads:
            raise ValidationError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.basis = basis
        self.w_q = nn.Linear(channels, channels, bias=False)
        self.w_k = nn.Linear(channels, channels, bias=False)
        self.w_v_low = nn.Linear(channels, channels, bias=False)
        self.w_v_high = nn.Linear(channels, channels, bias=False)
        self.act = nn.GELU()
        # 1x1 channel-mixing projection onto the four output sub-bands.
        self.band_proj = _zero_init(nn.Conv2d(channels, 4 * channels, kernel_size=1))

    def forward(self, x: Tensor, return_attn: bool = False):
        b, c, h, w = x.shape
        if c != self.channels:
            raise ValidationError(f"expected {self.channels} channels, got {c}")
        pyr = dwt2(x, self.basis)
        f_low = pyr.ll
        f_high = aggregate_high(pyr)
        hh, ww = f_low.shape[-2:]
        n = hh * ww
        d = c // self.heads

        def tokens(u):
            return u.reshape(b, c, n).transpose(1, 2)  # (B, N, C)

        def split_heads(u):
            return u.reshape(b, n, self.heads, d).transpose(1, 2)

        q = split_heads(self.w_q(tokens(f_low)))
        k = split_heads(self.w_k(tokens(f_high)))
        v_low = split_heads(self.w_v_low(tokens(f_low)))
        v_high = split_heads(self.w_v_high(tokens(f_high)))

        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        gathered = attn @ v_low + attn @ v_high  # A_l + A_h
        gathered = gathered.transpose(1, 2).reshape(b, n, c).transpose(1, 2)
        gathered = gathered.reshape(b, c, hh, ww)

        bands = self.band_proj(self.act(gathered)).reshape(b, 4, c, hh, ww)
        out = idwt2(
            WaveletPyramid(
                ll=bands[:, 0],
                lh=bands[:, 1],
                hl=bands[:, 2],
                hh=bands[:, 3],
                basis=self.basis,
                source_shape=(h, w),
            )
        )
        if return_attn:
            return out, attn
        return out


class ConvPathway(nn.Module):
    """Channel expansion, depthwise conv, nonlinearity, zero-init contraction."""

    def __init__(self, channels: int, expand: int = 2):
        super().__init__()
        mid = channels * expand
        self.net = nn.Sequential(
            nn.Conv2d(channels, mid, kernel_size=1),
            nn.GELU(),
            nn.Conv2d(mid, mid, kernel_size=3, padding=1, groups=mid),
            nn.GELU(),
            _zero_init(nn.Conv2d(mid, channels, kernel_size=1)),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class WtfBlock(nn.Module):
    """Dual-branch block: convolutional pathway plus wavelet attention pathway,
    both added residually. An exact identity at initialization."""

    def __init__(self, channels: int, heads: int = 4, basis: str = DEFAULT_BASIS):
        super().__init__()
        self.conv_path = ConvPathway(channels)
        self.wthl = WthlAttention(channels, heads=heads, basis=basis)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv_path(x) + self.wthl(x)


class ResBlock2D(nn.Module):
    """Pre-norm residual conv block with optional 2x down/upsampling and an
    optional additive time-embedding input (used by the diffusion denoiser)."""

    def __init__(self, cin: int, cout: int, mode: str = "same", temb_dim: int | None = None):
        super().__init__()
        if mode not in ("same", "down", "up"):
            raise ValidationError(f"unknown resample mode {mode!r}")
        self.mode = mode
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.act = nn.GELU()
        if mode == "down":
            self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        else:
            self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = _zero_init(nn.Conv2d(cout, cout, 3, padding=1))
        self.temb_proj = nn.Linear(temb_dim, cout) if temb_dim else None

        if mode == "same" and cin == cout:
            self.skip = nn.Identity()
        elif mode == "down":
            self.skip = nn.Conv2d(cin, cout, 1, stride=2)
        else:
            self.skip = nn.Conv2d(cin, cout, 1)

    def _upsample(self, x: Tensor) -> Tensor:
        return nn.functional.interpolate(x, scale_factor=2, mode="nearest")

    def forward(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        h = x
        if self.mode == "up":
            h = self._upsample(h)
            x = self._upsample(x)
        h = self.conv1(self.act(self.norm1(h)))
        if self.temb_proj is not None:
            if temb is None:
                raise ValidationError("block built with temb_dim but no temb passed")
            h = h + self.temb_proj(temb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


class LevelBlock(nn.Module):
    """One encoder/decoder level: residual conv, windowed attention, WTF."""

    def __init__(
        self,
        channels: int,
        heads: int,
        window: int,
        basis: str,
        use_wtf: bool = True,
    ):
        super().__init__()
        self.res = ResBlock2D(channels, channels)
        self.attn_norm = nn.GroupNorm(_groups(channels), channels)
        self.attn = WindowedSelfAttention(channels, heads=heads, window=window)
        self.wtf = WtfBlock(channels, heads=heads, basis=basis) if use_wtf else None

    def forward(self, x: Tensor) -> Tensor:
        x = self.res(x)
        x = x + self.attn(self.attn_norm(x))
        if self.wtf is not None:
            x = self.wtf(x)
        return x


class WTFormer(nn.Module):
    """Two-level U-shaped coarse estimator mapping (B, C, H, W) -> (B, 1, H, W).

    H and W must be divisible by 4 (two 2x downsamplings) and each level's
    resolution by the attention window. Output passes through a sigmoid, so
    the coarse estimate always lies in [0, 1].
    """

    def __init__(
        self,
        in_channels: int = 4,
        widths: tuple[int, int] = (32, 64),
        heads: int = 4,
        window: int = 8,
        basis: str = DEFAULT_BASIS,
        use_wtf: bool = True,
    ):
        super().__init__()
        w1, w2 = widths
        self.in_channels = in_channels
        self.window = window
        self.stem = nn.Conv2d(in_channels, w1, 3, padding=1)
        self.enc1 = LevelBlock(w1, heads, window, basis, use_wtf)
        self.down1 = ResBlock2D(w1, w2, "down")
        self.enc2 = LevelBlock(w2, heads, window, basis, use_wtf)
        self.down2 = ResBlock2D(w2, w2, "down")
        self.mid = ResBlock2D(w2, w2)
        self.up1 = ResBlock2D(w2, w2, "up")
        self.fuse1 = nn.Conv2d(2 * w2, w2, 1)
        self.dec2 = LevelBlock(w2, heads, window, basis, use_wtf)
        self.up2 = ResBlock2D(w2, w1, "up")
        self.fuse2 = nn.Conv2d(2 * w1, w1, 1)
        self.dec1 = LevelBlock(w1, heads, window, basis, use_wtf)
        self.head_norm = nn.GroupNorm(_groups(w1), w1)
        self.head = nn.Conv2d(w1, 1, 3, padding=1)

    def forward(self, stack: Tensor) -> Tensor:
        squeeze = stack.ndim == 3
        if squeeze:
            stack = stack[None]
        if stack.ndim != 4:
            raise ValidationError(f"expected (B, C, H, W) stack, got {tuple(stack.shape)}")
        b, c, h, w = stack.shape
        if c != self.in_channels:
            raise ValidationError(f"expected {self.in_channels} channels, got {c}")
        if h % 4 or w % 4:
            raise ValidationError(f"grid ({h}, {w}) must be divisible by 4")
        for r in (1, 2):
            if (h // r) % self.window or (w // r) % self.window:
                raise ValidationError(
                    f"grid ({h}, {w}) not divisible by window {self.window} at level {r}"
                )

        h0 = self.stem(stack)
        e1 = self.enc1(h0)
        e2 = self.enc2(self.down1(e1))
        m = self.mid(self.down2(e2))
        u1 = self.fuse1(torch.cat([self.up1(m), e2], dim=1))
        f1 = self.dec2(u1)
        u2 = self.fuse2(torch.cat([self.up2(f1), e1], dim=1))
        f2 = self.dec1(u2)
        mu = torch.sigmoid(self.head(self.act_head(f2)))
        return mu[0] if squeeze else mu

    def act_head(self, x: Tensor) -> Tensor:
        return nn.functional.gelu(self.head_norm(x))


@dataclass
class StepRecord:
    """One training-step line of the loss log."""

    step: int
    loss: float
    tag: str
    p_t: float
    fibl_low: float | None = None
    fibl_high: float | None = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "loss": self.loss,
            "tag": self.tag,
            "p_t": self.p_t,
            "fibl_low": self.fibl_low,
            "fibl_high": self.fibl_high,
        }


def build_wtformer(cfg) -> WTFormer:
    """Construct the coarse model from a RunConfig."""
    return WTFormer(
        in_channels=4 if cfg.model.use_vis else 3,
        widths=tuple(cfg.model.widths),
        heads=cfg.model.heads,
        window=cfg.model.window,
        basis=cfg.model.basis,
        use_wtf=cfg.model.use_wtf,
    )


def resolve_fibl_config(cfg, targets=None) -> FiblConfig:
    """FiblConfig from the loss section; alpha optionally fit to target energy."""
    loss = cfg.loss
    if loss.alpha_mode == "energy":
        if targets is None:
            raise ValidationError("alpha_mode=energy needs target fields")
        alpha = alpha_from_energy(targets, loss.alpha_min, loss.alpha_max, cfg.model.basis)
    elif loss.alpha_mode == "fixed":
        alpha = loss.alpha
    else:
        raise ValidationError(f"unknown alpha_mode {loss.alpha_mode!r}")
    return FiblConfig(
        alpha=alpha, w_lh=loss.w_lh, w_hl=loss.w_hl, w_hh=loss.w_hh, basis=cfg.model.basis
    )


def train_stage1(records, cfg, diag_path=None):
    """Optimize the coarse estimator on normalized records.

    Returns (model, history, fibl_cfg). Reproducible: model init, batch
    sampling and the loss schedule are all derived from cfg.run.seed.
    """
    records = list(records)
    if not records:
        raise ValidationError("training needs at least one record")
    from .data import to_tensors

    x, y = to_tensors(records, use_vis=cfg.model.use_vis)
    torch.manual_seed(cfg.run.seed)
    model = build_wtformer(cfg)
    fibl_cfg = resolve_fibl_config(cfg, targets=[y[i, 0] for i in range(y.shape[0])])

    opt = torch.optim.Adam(model.parameters(), lr=cfg.run.lr)
    batch_rng = np.random.default_rng([cfg.run.seed, 2])
    sched_rng = np.random.default_rng([cfg.run.seed, 1])
    total = cfg.run.steps
    history: list[StepRecord] = []

    for step in range(total):
        idx = batch_rng.integers(0, x.shape[0], size=min(cfg.run.batch_size, x.shape[0]))
        xb, yb = x[idx], y[idx]
        state = ScheduleState(
            step=step, total_steps=total, rng=sched_rng, direction=cfg.loss.direction
        )
        tag = schedule_select(state)
        mu = model(xb)
        low = high = None
        if tag == FGL:
            loss = fgl(mu, yb)
        else:
            parts = fibl(mu, yb, fibl_cfg)
            loss = parts.total
            low, high = float(parts.low.detach()), float(parts.high.detach())
        if not torch.isfinite(loss):
            if diag_path is not None:
                from .checkpoint import save_checkpoint

                save_checkpoint(diag_path, "stage1", model, cfg.to_dict(), step)
            raise TrainingDivergedError(
                f"non-finite stage-1 loss at step {step}"
                + (f"; diagnostic checkpoint at {diag_path}" if diag_path else "")
            )
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), cfg.run.grad_clip)
        opt.step()
        history.append(
            StepRecord(
                step=step,
                loss=float(loss.detach()),
                tag=tag,
                p_t=cosine_weight(step, total),
                fibl_low=low,
                fibl_high=high,
            )
        )
    return model, history, fibl_cfg


def evaluate_fibl(model, records, cfg, fibl_cfg=None) -> float:
    """Mean FIBL of the model over a record set (no gradients)."""
    from .data import to_tensors

    x, y = to_tensors(records, use_vis=cfg.model.use_vis)
    if fibl_cfg is None:
        fibl_cfg = resolve_fibl_config(cfg, targets=[y[i, 0] for i in range(y.shape[0])])
    model.eval()
    with torch.no_grad():
        value = float(fibl(model(x), y, fibl_cfg).total)
    model.train()
    return value
