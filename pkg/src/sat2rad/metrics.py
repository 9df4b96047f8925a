"""Forecast-verification and image-quality scores.

Scores are computed from pixelwise confusion counts at raw-scale intensity
thresholds. Aggregation over a sample set is micro-averaged: counts are pooled
across all samples first, then the ratio metrics are taken (the report records
this, together with the pooling recipe tag, so alternative conventions can be
compared). Thresholds where neither field has any event are undefined and are
skipped in averages rather than scored 0 or 1.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import ValidationError

# Raw-scale intensity thresholds used throughout evaluation (0-255 archive
# convention for vertically integrated liquid).
VIL_THRESHOLDS = (74.0, 133.0, 160.0, 181.0, 219.0)

# Identifies the pooled-score recipe in reports: max-pool with kernel = stride
# = pool on the raw fields, then threshold.
POOLING_RECIPE = "maxpool-v1"

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixelwise contingency table at one threshold."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_2d(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2D, got shape {arr.shape}")
    return arr


def confusion(pred, target, threshold: float) -> ConfusionCounts:
    """Binarize both fields at >= threshold and count tp/fp/fn/tn."""
    p = _as_2d("pred", pred)
    t = _as_2d("target", target)
    if p.shape != t.shape:
        raise ValidationError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    ph = p >= threshold
    th = t >= threshold
    tp = int(np.sum(ph & th))
    fp = int(np.sum(ph & ~th))
    fn = int(np.sum(~ph & th))
    tn = int(np.sum(~ph & ~th))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def csi(counts: ConfusionCounts) -> float | None:
    """Critical success index tp/(tp+fp+fn); None when undefined."""
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return None
    return counts.tp / denom


def hss(counts: ConfusionCounts) -> float | None:
    """Heidke skill score; None when the chance-corrected denominator is 0."""
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    denom = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    if denom == 0:
        return None
    return 2.0 * (tp * tn - fn * fp) / denom


def max_pool(fieldvals, pool: int) -> np.ndarray:
    """Non-overlapping max pooling with kernel = stride = pool."""
    arr = _as_2d("field", fieldvals)
    if pool <= 0:
        raise ValidationError(f"pool must be positive, got {pool}")
    h, w = arr.shape
    if h % pool or w % pool:
        raise ValidationError(f"grid ({h}, {w}) not divisible by pool {pool}")
    return arr.reshape(h // pool, pool, w // pool, pool).max(axis=(1, 3))


def pooled_confusion(pred, target, threshold: float, pool: int) -> ConfusionCounts:
    return confusion(max_pool(pred, pool), max_pool(target, pool), threshold)


def pooled_csi(pred, target, threshold: float, pool: int) -> float | None:
    """CSI after max-pooling both raw fields; credits near-miss placement."""
    return csi(pooled_confusion(pred, target, threshold, pool))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()

_SSIM_WINDOW = _gaussian_window()
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def ssim(pred, target) -> float:
    """Mean local SSIM on normalized [0, 1] fields.

    11x11 Gaussian window (sigma 1.5), stabilizers on unit dynamic range,
    'valid' windowing, so both dimensions must be at least 11.
    """
    p = _as_2d("pred", pred)
    t = _as_2d("target", target)
    if p.shape != t.shape:
        raise ValidationError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    if min(p.shape) < _SSIM_WINDOW.shape[0]:
        raise ValidationError(
            f"ssim needs at least {_SSIM_WINDOW.shape[0]} pixels per axis, got {p.shape}"
        )
    win = _SSIM_WINDOW
    mu_p = convolve2d(p, win, mode="valid")
    mu_t = convolve2d(t, win, mode="valid")
    var_p = convolve2d(p * p, win, mode="valid") - mu_p**2
    var_t = convolve2d(t * t, win, mode="valid") - mu_t**2
    cov = convolve2d(p * t, win, mode="valid") - mu_p * mu_t
    num = (2.0 * mu_p * mu_t + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_p**2 + mu_t**2 + _SSIM_C1) * (var_p + var_t + _SSIM_C2)
    return float(np.mean(num / den))


def _mean_defined(values) -> float | None:
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return sum(defined) / len(defined)


@dataclass
class MetricReport:
    """Aggregate scores over an evaluation set."""

    thresholds: tuple[float, ...]
    csi_by_threshold: dict[float, float | None]
    hss_by_threshold: dict[float, float | None]
    csi_pool4: float | None
    csi_pool16: float | None
    avg_csi: float | None
    avg_hss: float | None
    ssim: float
    n_samples: int
    pooling: str = POOLING_RECIPE
    # Reserved for an external perceptual-score adapter; never filled here.
    perceptual: float | None = None
    version: int = REPORT_FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "n_samples": self.n_samples,
            "pooling": self.pooling,
            "thresholds": list(self.thresholds),
            "csi": {str(k): v for k, v in self.csi_by_threshold.items()},
            "hss": {str(k): v for k, v in self.hss_by_threshold.items()},
            "csi_pool4": self.csi_pool4,
            "csi_pool16": self.csi_pool16,
            "avg_csi": self.avg_csi,
            "avg_hss": self.avg_hss,
            "ssim": self.ssim,
            "perceptual": self.perceptual,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        thresholds = tuple(float(t) for t in d["thresholds"])
        return cls(
            thresholds=thresholds,
            csi_by_threshold={float(k): v for k, v in d["csi"].items()},
            hss_by_threshold={float(k): v for k, v in d["hss"].items()},
            csi_pool4=d["csi_pool4"],
            csi_pool16=d["csi_pool16"],
            avg_csi=d["avg_csi"],
            avg_hss=d["avg_hss"],
            ssim=d["ssim"],
            n_samples=d["n_samples"],
            pooling=d.get("pooling", POOLING_RECIPE),
            perceptual=d.get("perceptual"),
            version=d.get("version", REPORT_FORMAT_VERSION),
            extra=d.get("extra", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        def fmt(v):
            return "skip" if v is None else f"{v:.6f}"

        lines = [
            f"report_version: {self.version}",
            f"n_samples: {self.n_samples}",
            f"pooling_recipe: {self.pooling}",
        ]
        for thr in self.thresholds:
            lines.append(f"csi[{thr:g}]: {fmt(self.csi_by_threshold[thr])}")
        for thr in self.thresholds:
            lines.append(f"hss[{thr:g}]: {fmt(self.hss_by_threshold[thr])}")
        lines += [
            f"csi_pool4: {fmt(self.csi_pool4)}",
            f"csi_pool16: {fmt(self.csi_pool16)}",
            f"avg_csi: {fmt(self.avg_csi)}",
            f"avg_hss: {fmt(self.avg_hss)}",
            f"ssim: {self.ssim:.6f}",
            f"perceptual: {fmt(self.perceptual)}",
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["threshold", "csi", "hss"])
        for thr in self.thresholds:
            writer.writerow(
                [f"{thr:g}", self.csi_by_threshold[thr], self.hss_by_threshold[thr]]
            )
        writer.writerow([])
        writer.writerow(["metric", "value", ""])
        for name, value in (
            ("csi_pool4", self.csi_pool4),
            ("csi_pool16", self.csi_pool16),
            ("avg_csi", self.avg_csi),
            ("avg_hss", self.avg_hss),
            ("ssim", self.ssim),
        ):
            writer.writerow([name, value, ""])
        return buf.getvalue()


def report(
    preds,
    targets,
    thresholds=VIL_THRESHOLDS,
    pools: tuple[int, ...] = (4, 16),
) -> MetricReport:
    """Micro-averaged scores over aligned raw-scale prediction/target pairs.

    Confusion counts are pooled over the whole set before any ratio is taken;
    SSIM is computed per sample on the fields rescaled to [0, 1] and averaged.
    """
    preds = list(preds)
    targets = list(targets)
    if not preds or not targets:
        raise ValidationError("report needs non-empty prediction and target sets")
    if len(preds) != len(targets):
        raise ValidationError(
            f"got {len(preds)} predictions but {len(targets)} targets"
        )
    thresholds = tuple(float(t) for t in thresholds)

    plain = {t: ConfusionCounts() for t in thresholds}
    pooled = {p: {t: ConfusionCounts() for t in thresholds} for p in pools}
    ssim_values = []
    for pr, tg in zip(preds, targets):
        for thr in thresholds:
            plain[thr] = plain[thr] + confusion(pr, tg, thr)
            for p in pools:
                pooled[p][thr] = pooled[p][thr] + pooled_confusion(pr, tg, thr, p)
        ssim_values.append(ssim(np.asarray(pr) / 255.0, np.asarray(tg) / 255.0))

    csi_by = {t: csi(plain[t]) for t in thresholds}
    hss_by = {t: hss(plain[t]) for t in thresholds}
    pooled_avg = {
        p: _mean_defined([csi(pooled[p][t]) for t in thresholds]) for p in pools
    }
    return MetricReport(
        thresholds=thresholds,
        csi_by_threshold=csi_by,
        hss_by_threshold=hss_by,
        csi_pool4=pooled_avg.get(4),
        csi_pool16=pooled_avg.get(16),
        avg_csi=_mean_defined(csi_by.values()),
        avg_hss=_mean_defined(hss_by.values()),
        ssim=float(np.mean(ssim_values)),
        n_samples=len(preds),
    )


def save_report(rep: MetricReport, out_dir) -> dict[str, str]:
    """Write the human-readable, JSON and CSV forms; returns the paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "text": out / "report.txt",
        "json": out / "report.json",
        "csv": out / "report.csv",
    }
    paths["text"].write_text(rep.to_text())
    paths["json"].write_text(rep.to_json())
    paths["csv"].write_text(rep.to_csv())
    return {k: str(v) for k, v in paths.items()}
