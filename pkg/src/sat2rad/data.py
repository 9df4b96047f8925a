"""Synthetic storm fields, event archives, normalization and splits.

Event records carry a four-channel observation stack in the canonical order
``(vis, ir069, ir107, lightning)`` plus the single-channel radar target
(vertically integrated liquid). Raw values live on the archive 0-255 scale;
``normalize`` maps them into [0, 1] and records the affine constants on the
record so ``denormalize`` is an exact inverse.

The synthetic generator stands in for a real storm-event corpus at desk
scale: anisotropic super-Gaussian cells with sharpened fronts drive the
radar field, and the satellite channels are derived proxies (smoothed cloud
shield for vis, inverted smoothed cells for the two ir bands, sparse strikes
at cell cores for lightning). Generation is a pure function of the spec, and
every fourth record is forced to contain a cell at the top of the amplitude
range so that all evaluation thresholds are exercised in any batch of eight
or more.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import h5py
import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import h5io
from .errors import (
    ArchiveError,
    CorruptRecordError,
    MissingEventError,
    MissingModalityError,
    ValidationError,
)

MODALITY_ORDER = ("vis", "ir069", "ir107", "lightning")
TARGET_MODALITY = "vil"
RAW_MAX = 255.0

ARCHIVE_FORMAT = "sat2rad-archive-v1"


@dataclass(frozen=True)
class SyntheticStormSpec:
    """Deterministic recipe for a batch of synthetic storm events."""

    seed: int = 0
    height: int = 64
    width: int = 64
    min_cells: int = 2
    max_cells: int = 5
    amp_range: tuple[float, float] = (60.0, 250.0)
    radius_range: tuple[float, float] = (3.0, 12.0)
    sharpness_range: tuple[float, float] = (1.0, 2.5)
    # Correlated multiplicative speckle inside cells: radar fields carry
    # fine-scale structure that the smoothed satellite proxies cannot see.
    texture_amp: float = 0.5
    texture_scale: float = 0.8
    # Cross-channel couplings mapping the latent storm field to the proxies.
    vis_gain: float = 1.0
    ir_gain: float = 0.85
    lightning_rate: float = 0.15
    # Every forced_core_every-th record contains one cell at amp_range[1].
    forced_core_every: int = 4

    def __post_init__(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ValidationError(f"bad grid size ({self.height}, {self.width})")
        if not 1 <= self.min_cells <= self.max_cells:
            raise ValidationError(
                f"bad cell count range [{self.min_cells}, {self.max_cells}]"
            )
        lo, hi = self.amp_range
        if not 0 <= lo <= hi <= RAW_MAX:
            raise ValidationError(f"amplitude range {self.amp_range} outside [0, 255]")
        if self.radius_range[0] <= 0 or self.radius_range[0] > self.radius_range[1]:
            raise ValidationError(f"bad radius range {self.radius_range}")
        if self.sharpness_range[0] < 0.5 or self.sharpness_range[0] > self.sharpness_range[1]:
            raise ValidationError(f"bad sharpness range {self.sharpness_range}")
        if not 0 <= self.texture_amp < 1:
            raise ValidationError(f"texture_amp must lie in [0, 1), got {self.texture_amp}")
        if self.forced_core_every < 1:
            raise ValidationError("forced_core_every must be >= 1")


@dataclass(frozen=True)
class ChannelNorm:
    """Affine map normalized = (raw - lo) / scale used on one channel."""

    lo: float
    scale: float


@dataclass
class EventRecord:
    """One storm event: observation stack, radar target and metadata.

    ``norms`` is None for raw-scale records and carries per-channel affine
    constants once normalized.
    """

    event_id: str
    stack: np.ndarray  # (4, H, W), canonical modality order
    target: np.ndarray  # (H, W)
    timestamp: str = ""
    norms: dict[str, ChannelNorm] | None = None

    @property
    def is_normalized(self) -> bool:
        return self.norms is not None

    def validate(self) -> None:
        if self.stack.ndim != 3 or self.stack.shape[0] != len(MODALITY_ORDER):
            raise ValidationError(
                f"stack must be ({len(MODALITY_ORDER)}, H, W), got {self.stack.shape}"
            )
        if self.target.shape != self.stack.shape[1:]:
            raise ValidationError(
                f"target shape {self.target.shape} != stack grid {self.stack.shape[1:]}"
            )
        if not (np.isfinite(self.stack).all() and np.isfinite(self.target).all()):
            raise ValidationError(f"event {self.event_id} contains non-finite values")


def _storm_cell(rng, h: int, w: int, spec: SyntheticStormSpec, amp: float) -> np.ndarray:
    cy = rng.uniform(0.15 * h, 0.85 * h)
    cx = rng.uniform(0.15 * w, 0.85 * w)
    ry = rng.uniform(*spec.radius_range)
    rx = rng.uniform(*spec.radius_range)
    theta = rng.uniform(0.0, np.pi)
    sharp = rng.uniform(*spec.sharpness_range)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    q = (u / rx) ** 2 + (v / ry) ** 2
    # Exponent > 1 steepens the falloff: flat core, sharp front.
    return amp * np.exp(-(q**sharp))


def generate_synthetic(spec: SyntheticStormSpec, n: int) -> list[EventRecord]:
    """Generate ``n`` raw-scale event records, bitwise-deterministic in spec."""
    if n < 1:
        raise ValidationError(f"need n >= 1 events, got {n}")
    h, w = spec.height, spec.width
    records = []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, i])
        n_cells = int(rng.integers(spec.min_cells, spec.max_cells + 1))
        vil = np.zeros((h, w), dtype=np.float64)
        for c in range(n_cells):
            forced = i % spec.forced_core_every == 0 and c == 0
            amp = spec.amp_range[1] if forced else rng.uniform(*spec.amp_range)
            vil = np.maximum(vil, _storm_cell(rng, h, w, spec, amp))
        smooth_vil = np.clip(vil, 0.0, RAW_MAX)

        if spec.texture_amp > 0:
            speckle = gaussian_filter(rng.standard_normal((h, w)), spec.texture_scale)
            speckle /= max(float(speckle.std()), 1e-12)
            vil = smooth_vil * (1.0 + spec.texture_amp * speckle)
            # Texture must not erode the extreme cores the thresholds rely on.
            vil = np.where(smooth_vil >= 230.0, np.maximum(vil, smooth_vil), vil)
        vil = np.clip(vil, 0.0, RAW_MAX)

        # Satellite proxies observe the smooth storm envelope, not the
        # radar-scale texture.
        shield = gaussian_filter(smooth_vil, sigma=4.0)
        vis = RAW_MAX * (1.0 - np.exp(-spec.vis_gain * shield / 40.0))
        ir069 = np.clip(
            235.0 - spec.ir_gain * gaussian_filter(smooth_vil, sigma=3.0), 0.0, RAW_MAX
        )
        ir107 = np.clip(
            245.0 - 0.7 * spec.ir_gain * gaussian_filter(smooth_vil, sigma=5.0), 0.0, RAW_MAX
        )

        core = np.clip(vil - 150.0, 0.0, None) / (RAW_MAX - 150.0)
        strikes = rng.random((h, w)) < spec.lightning_rate * core
        lightning = np.where(strikes, rng.uniform(120.0, RAW_MAX, size=(h, w)), 0.0)

        stack = np.stack([vis, ir069, ir107, lightning]).astype(np.float32)
        rec = EventRecord(
            event_id=f"s{spec.seed}-e{i:04d}",
            stack=np.clip(stack, 0.0, RAW_MAX),
            target=vil.astype(np.float32),
            timestamp=f"2019-06-01T{i // 12:02d}:{(i % 12) * 5:02d}:00Z",
        )
        rec.validate()
        records.append(rec)
    return records


def threshold_pixel_counts(records, thresholds) -> dict[float, int]:
    """Total target pixels at or above each threshold, across all records."""
    counts = {float(t): 0 for t in thresholds}
    for rec in records:
        for t in counts:
            counts[t] += int(np.sum(rec.target >= t))
    return counts


# -- archive fixture (HDF5) --------------------------------------------------
#
# Layout: one group per event id holding one little-endian float32 dataset per
# modality plus "vil"; the timestamp is a group attribute. Object creation
# times are disabled everywhere so rewriting the same records yields
# byte-identical files.


def write_fixture(records, path) -> None:
    """Write raw-scale records to an archive file (deterministic bytes)."""
    records = list(records)
    if not records:
        raise ValidationError("refusing to write an empty archive")
    for rec in records:
        if rec.is_normalized:
            raise ValidationError(
                f"archives store raw-scale records; {rec.event_id} is normalized"
            )
        rec.validate()
    try:
        with h5io.create_file(path) as f:
            f.attrs["format"] = ARCHIVE_FORMAT
            for rec in records:
                g = h5io.create_group(f, rec.event_id)
                g.attrs["timestamp"] = rec.timestamp
                for k, name in enumerate(MODALITY_ORDER):
                    g.create_dataset(
                        name, data=rec.stack[k].astype("<f4"), track_times=False
                    )
                g.create_dataset(
                    TARGET_MODALITY, data=rec.target.astype("<f4"), track_times=False
                )
    except OSError as e:
        raise ArchiveError(f"cannot write archive {path}: {e}") from e


def _resample_bilinear(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if arr.shape == shape:
        return arr
    t = torch.from_numpy(arr.astype(np.float32))[None, None]
    out = torch.nn.functional.interpolate(
        t, size=shape, mode="bilinear", align_corners=False
    )
    return out[0, 0].numpy()


def load_archive(path, event_ids=None) -> list[EventRecord]:
    """Load raw-scale records; modalities are resampled to the target grid.

    Raises :class:`MissingEventError` for an absent id,
    :class:`MissingModalityError` for an event lacking a channel and
    :class:`CorruptRecordError` for unreadable or non-finite data.
    """
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"archive not found: {path}")
    records = []
    try:
        f = h5py.File(path, "r")
    except OSError as e:
        raise ArchiveError(f"cannot open archive {path}: {e}") from e
    with f:
        available = list(f.keys())
        ids = available if event_ids is None else list(event_ids)
        for event_id in ids:
            if event_id not in f:
                raise MissingEventError(
                    f"event {event_id!r} not in archive {path.name}"
                )
            g = f[event_id]
            if TARGET_MODALITY not in g:
                raise MissingModalityError(
                    f"event {event_id!r} lacks modality {TARGET_MODALITY!r}"
                )
            try:
                target = np.asarray(g[TARGET_MODALITY], dtype=np.float32)
                channels = []
                for name in MODALITY_ORDER:
                    if name not in g:
                        raise MissingModalityError(
                            f"event {event_id!r} lacks modality {name!r}"
                        )
                    arr = np.asarray(g[name], dtype=np.float32)
                    if arr.ndim != 2:
                        raise CorruptRecordError(
                            f"event {event_id!r} modality {name!r} is not 2D"
                        )
                    channels.append(_resample_bilinear(arr, target.shape))
                rec = EventRecord(
                    event_id=event_id,
                    stack=np.stack(channels),
                    target=target,
                    timestamp=str(g.attrs.get("timestamp", "")),
                )
                rec.validate()
            except (MissingModalityError, CorruptRecordError):
                raise
            except (OSError, ValidationError) as e:
                raise CorruptRecordError(f"event {event_id!r} unreadable: {e}") from e
            records.append(rec)
    return records


# -- normalization ------------------------------------------------------------

_FIXED_SCALE = {"vis": True, TARGET_MODALITY: True, "ir069": False, "ir107": False, "lightning": False}


def _channel_norm(name: str, raw: np.ndarray) -> ChannelNorm:
    if _FIXED_SCALE[name]:
        return ChannelNorm(lo=0.0, scale=RAW_MAX)
    lo = float(raw.min())
    span = float(raw.max()) - lo
    # A constant channel keeps scale 1 so the round trip stays exact.
    return ChannelNorm(lo=lo, scale=span if span > 0 else 1.0)


def normalize(record: EventRecord) -> EventRecord:
    """Map a raw-scale record into [0, 1]; constants land on the record."""
    if record.is_normalized:
        raise ValidationError(f"event {record.event_id} is already normalized")
    record.validate()
    norms = {}
    channels = []
    for k, name in enumerate(MODALITY_ORDER):
        cn = _channel_norm(name, record.stack[k])
        norms[name] = cn
        channels.append((record.stack[k].astype(np.float64) - cn.lo) / cn.scale)
    tn = _channel_norm(TARGET_MODALITY, record.target)
    norms[TARGET_MODALITY] = tn
    target = (record.target.astype(np.float64) - tn.lo) / tn.scale
    return replace(record, stack=np.stack(channels), target=target, norms=norms)


def denormalize(record: EventRecord) -> EventRecord:
    """Exact inverse of :func:`normalize`."""
    if not record.is_normalized:
        raise ValidationError(f"event {record.event_id} is not normalized")
    channels = []
    for k, name in enumerate(MODALITY_ORDER):
        cn = record.norms[name]
        channels.append(record.stack[k].astype(np.float64) * cn.scale + cn.lo)
    tn = record.norms[TARGET_MODALITY]
    target = record.target.astype(np.float64) * tn.scale + tn.lo
    return replace(record, stack=np.stack(channels), target=target, norms=None)


def to_tensors(records, use_vis: bool = True):
    """Stack normalized records into float32 tensors (B, C, H, W) and (B, 1, H, W).

    ``use_vis=False`` drops the visible channel, giving a 3-channel stack.
    """
    records = list(records)
    if not records:
        raise ValidationError("no records to convert")
    for rec in records:
        if not rec.is_normalized:
            raise ValidationError(f"event {rec.event_id} must be normalized first")
    x = np.stack([rec.stack for rec in records]).astype(np.float32)
    y = np.stack([rec.target[None] for rec in records]).astype(np.float32)
    if not use_vis:
        x = x[:, 1:]
    return torch.from_numpy(x), torch.from_numpy(y)


# -- splitting ----------------------------------------------------------------


def split(records, fractions, seed: int):
    """Disjoint, exhaustive, seed-deterministic partition by event id."""
    records = list(records)
    fractions = tuple(float(f) for f in fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be >= 0 and sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(records))
    shuffled = [records[i] for i in order]

    n = len(records)
    counts = [int(np.floor(f * n)) for f in fractions]
    remainders = [f * n - c for f, c in zip(fractions, counts)]
    for _ in range(n - sum(counts)):
        k = int(np.argmax(remainders))
        counts[k] += 1
        remainders[k] = -1.0
    parts = []
    start = 0
    for c in counts:
        parts.append(shuffled[start : start + c])
        start += c
    return tuple(parts)


# -- portable single-tensor files ---------------------------------------------
#
# 16-byte magic, then a little-endian uint32 header length, then a JSON header
# recording dtype (numpy string, includes endianness), shape and layout order,
# then the raw little-endian payload.

TENSOR_MAGIC = b"SAT2RADTENSOR\x00\x00\x00"
_TENSOR_DTYPES = {"<f4", "<f8"}

assert len(TENSOR_MAGIC) == 16


def save_tensor(path, array) -> None:
    arr = np.asarray(array)
    dtype = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}.get(
        arr.dtype.newbyteorder("=")
    )
    if dtype is None:
        raise ValidationError(f"unsupported tensor dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr.astype(dtype))
    header = json.dumps(
        {"dtype": dtype, "shape": list(arr.shape), "order": "C"}, sort_keys=True
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ArchiveError(f"cannot read tensor file {path}: {e}") from e
    if len(blob) < 20 or blob[:16] != TENSOR_MAGIC:
        raise CorruptRecordError(f"{path.name}: bad tensor-file magic")
    (hlen,) = struct.unpack("<I", blob[16:20])
    try:
        header = json.loads(blob[20 : 20 + hlen].decode())
        dtype, shape = header["dtype"], tuple(header["shape"])
    except (ValueError, KeyError) as e:
        raise CorruptRecordError(f"{path.name}: bad tensor header: {e}") from e
    if dtype not in _TENSOR_DTYPES:
        raise CorruptRecordError(f"{path.name}: unsupported dtype {dtype!r}")
    payload = blob[20 + hlen :]
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise CorruptRecordError(
            f"{path.name}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
