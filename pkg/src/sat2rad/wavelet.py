"""Single-level separable 2D discrete wavelet transform and its inverse.

This is the numerical foundation of the whole pipeline: the coarse-stage
attention blocks, the frequency-decomposed losses, the diffusion conditioning
features and the analysis tooling all work on the four half-resolution
sub-bands produced here.

Conventions (fixed once, relied on by every consumer):

* A field is a tensor whose last two axes are (H, W); any leading axes
  (batch, channel) are mapped independently.
* ``ll`` is the low-frequency approximation. ``lh`` is low-pass along width
  and high-pass along height (responds to horizontal edges), ``hl`` the
  transpose of that, ``hh`` the diagonal band.
* The default basis is the orthonormal Haar pair
  ``f_l = [1/sqrt(2), 1/sqrt(2)]``, ``f_h = [1/sqrt(2), -1/sqrt(2)]``,
  which makes the transform an exact isometry: perfect reconstruction and
  energy conservation hold to floating-point precision.

All functions are pure and differentiable through torch autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ValidationError

BAND_NAMES = ("ll", "lh", "hl", "hh")

_SQRT2 = math.sqrt(2.0)
_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class Basis:
    """An orthonormal analysis filter pair, periodized at the boundary."""

    name: str
    dec_lo: tuple[float, ...]
    dec_hi: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.dec_lo) != len(self.dec_hi):
            raise ValidationError("low and high filters must have equal length")
        if len(self.dec_lo) % 2 != 0:
            raise ValidationError("filter length must be even")


HAAR = Basis(
    "haar-orthonormal",
    dec_lo=(1.0 / _SQRT2, 1.0 / _SQRT2),
    dec_hi=(1.0 / _SQRT2, -1.0 / _SQRT2),
)

# Daubechies-2, periodized. Registered to exercise the alternative-basis hook;
# anything orthonormal with even length slots in the same way.
_DB2_LO = (
    (1.0 + _SQRT3) / (4.0 * _SQRT2),
    (3.0 + _SQRT3) / (4.0 * _SQRT2),
    (3.0 - _SQRT3) / (4.0 * _SQRT2),
    (1.0 - _SQRT3) / (4.0 * _SQRT2),
)
DB2 = Basis(
    "db2-orthonormal",
    dec_lo=_DB2_LO,
    dec_hi=tuple((-1.0) ** k * _DB2_LO[len(_DB2_LO) - 1 - k] for k in range(len(_DB2_LO))),
)

_BASES: dict[str, Basis] = {HAAR.name: HAAR, DB2.name: DB2}

DEFAULT_BASIS = HAAR.name


def register_basis(basis: Basis) -> None:
    """Make an additional orthonormal basis available by name."""
    _BASES[basis.name] = basis


def get_basis(name: str) -> Basis:
    try:
        return _BASES[name]
    except KeyError:
        raise ValidationError(
            f"unknown wavelet basis {name!r}; known: {sorted(_BASES)}"
        ) from None


@dataclass
class WaveletPyramid:
    """The four sub-bands of one decomposition level plus basis metadata.

    Every band has shape ``(..., H/2, W/2)`` where ``(H, W)`` is
    ``source_shape``.
    """

    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    basis: str
    source_shape: tuple[int, int]

    def bands(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.ll, self.lh, self.hl, self.hh

    def validate(self) -> None:
        shapes = {tuple(b.shape) for b in self.bands()}
        if len(shapes) != 1:
            raise ValidationError(f"sub-band shapes differ: {sorted(shapes)}")
        get_basis(self.basis)


def _as_field(field, *, allow_nonfinite: bool = False) -> Tensor:
    x = torch.as_tensor(field)
    if not x.is_floating_point():
        x = x.double()
    if x.ndim < 2:
        raise ValidationError(f"expected a (..., H, W) field, got shape {tuple(x.shape)}")
    if not allow_nonfinite and not torch.isfinite(x).all():
        raise ValidationError("field contains NaN or Inf values")
    return x


# Cache of 1D analysis matrices for the generic (non-Haar) path, keyed by
# (basis name, axis length, dtype, device).
_MATRIX_CACHE: dict[tuple, Tensor] = {}


def _analysis_matrix(basis: Basis, n: int, dtype: torch.dtype, device: torch.device) -> Tensor:
    """N x N orthonormal matrix: first N/2 rows low-pass, last N/2 high-pass.

    Row k of each half implements y[k] = sum_m f[m] * x[(m + 2k) mod n], the
    periodized strided correlation of the analysis filter with the signal.
    """
    key = (basis.name, n, dtype, str(device))
    cached = _MATRIX_CACHE.get(key)
    if cached is not None:
        return cached
    if len(basis.dec_lo) > n:
        raise ValidationError(
            f"axis length {n} shorter than filter length {len(basis.dec_lo)}"
        )
    mat = torch.zeros((n, n), dtype=dtype, device=device)
    half = n // 2
    for row, filt in ((0, basis.dec_lo), (half, basis.dec_hi)):
        for k in range(half):
            for m, coeff in enumerate(filt):
                mat[row + k, (m + 2 * k) % n] += coeff
    _MATRIX_CACHE[key] = mat
    return mat


def _dwt2_haar(x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    x00 = x[..., 0::2, 0::2]
    x01 = x[..., 0::2, 1::2]
    x10 = x[..., 1::2, 0::2]
    x11 = x[..., 1::2, 1::2]
    ll = 0.5 * (x00 + x01 + x10 + x11)
    lh = 0.5 * (x00 + x01 - x10 - x11)
    hl = 0.5 * (x00 - x01 + x10 - x11)
    hh = 0.5 * (x00 - x01 - x10 + x11)
    return ll, lh, hl, hh


def _idwt2_haar(ll: Tensor, lh: Tensor, hl: Tensor, hh: Tensor) -> Tensor:
    shape = list(ll.shape)
    shape[-2] *= 2
    shape[-1] *= 2
    out = ll.new_empty(shape)
    out[..., 0::2, 0::2] = 0.5 * (ll + lh + hl + hh)
    out[..., 0::2, 1::2] = 0.5 * (ll + lh - hl - hh)
    out[..., 1::2, 0::2] = 0.5 * (ll - lh + hl - hh)
    out[..., 1::2, 1::2] = 0.5 * (ll - lh - hl + hh)
    return out


def dwt2(field, basis: str = DEFAULT_BASIS, *, pad_odd: bool = False) -> WaveletPyramid:
    """Decompose a field into (ll, lh, hl, hh) at half resolution.

    Odd heights/widths are rejected unless ``pad_odd`` is set, in which case
    the field is symmetrically extended by one replicated row/column before
    the transform (the pyramid then records the padded source shape).
    """
    b = get_basis(basis)
    x = _as_field(field)
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        if not pad_odd:
            raise ValidationError(
                f"field dimensions must be even for the DWT, got ({h}, {w}); "
                "pass pad_odd=True to symmetrically pad ingestion data"
            )
        pad_h, pad_w = h % 2, w % 2
        x = torch.cat([x, x[..., -1:, :]], dim=-2) if pad_h else x
        x = torch.cat([x, x[..., :, -1:]], dim=-1) if pad_w else x
        h, w = x.shape[-2], x.shape[-1]

    if b.name == HAAR.name:
        ll, lh, hl, hh = _dwt2_haar(x)
    else:
        a_h = _analysis_matrix(b, h, x.dtype, x.device)
        a_w = _analysis_matrix(b, w, x.dtype, x.device)
        g = a_h @ x @ a_w.transpose(-2, -1)
        hh_, hw_ = h // 2, w // 2
        ll = g[..., :hh_, :hw_]
        hl = g[..., :hh_, hw_:]
        lh = g[..., hh_:, :hw_]
        hh = g[..., hh_:, hw_:]
    return WaveletPyramid(ll=ll, lh=lh, hl=hl, hh=hh, basis=b.name, source_shape=(h, w))


def idwt2(pyramid: WaveletPyramid) -> Tensor:
    """Invert :func:`dwt2`; exact up to floating-point rounding."""
    pyramid.validate()
    b = get_basis(pyramid.basis)
    ll, lh, hl, hh = pyramid.bands()
    if b.name == HAAR.name:
        return _idwt2_haar(ll, lh, hl, hh)
    h, w = pyramid.source_shape
    g = torch.cat(
        [torch.cat([ll, hl], dim=-1), torch.cat([lh, hh], dim=-1)], dim=-2
    )
    a_h = _analysis_matrix(b, h, g.dtype, g.device)
    a_w = _analysis_matrix(b, w, g.dtype, g.device)
    return a_h.transpose(-2, -1) @ g @ a_w


def selective_reconstruct(pyramid: WaveletPyramid, keep) -> Tensor:
    """Reconstruct from a subset of bands, zeroing the discarded ones.

    By linearity, reconstructions from complementary subsets add up to the
    full inverse transform.
    """
    keep = frozenset(keep)
    if not keep:
        raise ValidationError("keep set must be non-empty")
    unknown = keep - set(BAND_NAMES)
    if unknown:
        raise ValidationError(f"unknown band names: {sorted(unknown)}")
    bands = {
        name: band if name in keep else torch.zeros_like(band)
        for name, band in zip(BAND_NAMES, pyramid.bands())
    }
    kept = WaveletPyramid(
        basis=pyramid.basis, source_shape=pyramid.source_shape, **bands
    )
    return idwt2(kept)


def aggregate_high(pyramid: WaveletPyramid) -> Tensor:
    """Elementwise sum of the three detail bands, at half resolution."""
    pyramid.validate()
    return pyramid.lh + pyramid.hl + pyramid.hh
