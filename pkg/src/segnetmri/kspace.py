"""Measurement physics: centered unitary FFTs, Cartesian masks and data fidelity.

All operators act on the last two axes, so a leading batch axis is allowed.
Inputs may be numpy arrays or torch tensors; numpy in gives numpy out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InfeasibleMaskError, ParameterError, ShapeError

__all__ = [
    "ComplexImage",
    "SamplingMask",
    "KSpaceMeasurement",
    "fft2c",
    "ifft2c",
    "make_cartesian_mask",
    "forward_undersample",
    "zero_filled",
    "data_fidelity",
    "to_channels",
    "from_channels",
]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ComplexImage:
    """An H x W complex array tagged with the domain it lives in."""

    data: np.ndarray
    domain: str = "image"

    def __post_init__(self):
        if self.domain not in ("image", "kspace"):
            raise ParameterError(f"unknown domain {self.domain!r}")
        data = np.asarray(self.data)
        if data.ndim != 2 or min(data.shape) < 2:
            raise ShapeError(f"expected an H x W array with H, W >= 2, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("complex image contains non-finite entries")
        object.__setattr__(self, "data", data.astype(np.complex128, copy=False))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def to_kspace(self) -> ComplexImage:
        if self.domain == "kspace":
            return self
        return ComplexImage(fft2c(self.data), "kspace")

    def to_image(self) -> ComplexImage:
        if self.domain == "image":
            return self
        return ComplexImage(ifft2c(self.data), "image")


@dataclass(frozen=True)
class SamplingMask:
    """Row-wise Cartesian sampling pattern in centered k-space coordinates."""

    mask: np.ndarray
    sampling_rate: float
    center_fraction: float = 0.0
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def num_samples(self) -> int:
        return int(self.mask.sum())

    @property
    def achieved_rate(self) -> float:
        return self.num_samples / self.mask.size

    def sampled_rows(self) -> np.ndarray:
        return np.flatnonzero(self.mask[:, 0])


@dataclass
class KSpaceMeasurement:
    """Undersampled k-space values (zero where unsampled) and their mask.

    ``values`` has shape (..., H, W); ``mask`` is a 0/1 array of shape
    (H, W) or broadcastable to ``values``.
    """

    values: np.ndarray | torch.Tensor
    mask: np.ndarray | torch.Tensor

    @property
    def shape(self):
        return tuple(self.values.shape)


def _to_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.from_numpy(np.asarray(x)), True


def _mask_array(mask) -> np.ndarray | torch.Tensor:
    return mask.mask if isinstance(mask, SamplingMask) else mask


def _mask_like(mask, ref: torch.Tensor) -> torch.Tensor:
    m, _ = _to_tensor(_mask_array(mask))
    real_dtype = ref.real.dtype if ref.is_complex() else ref.dtype
    return m.to(device=ref.device, dtype=real_dtype)


def _back(x: torch.Tensor, was_numpy: bool):
    return x.detach().numpy() if was_numpy else x


def fft2c(x):
    """Centered orthonormal 2D DFT over the last two axes."""
    t, was_np = _to_tensor(x)
    if not t.is_complex():
        t = t.to(torch.complex128 if t.dtype == torch.float64 else torch.complex64)
    dims = (-2, -1)
    k = torch.fft.fftshift(torch.fft.fft2(torch.fft.ifftshift(t, dim=dims), norm="ortho"), dim=dims)
    return _back(k, was_np)


def ifft2c(k):
    """Inverse (and adjoint) of :func:`fft2c`."""
    t, was_np = _to_tensor(k)
    if not t.is_complex():
        t = t.to(torch.complex128 if t.dtype == torch.float64 else torch.complex64)
    dims = (-2, -1)
    x = torch.fft.fftshift(torch.fft.ifft2(torch.fft.ifftshift(t, dim=dims), norm="ortho"), dim=dims)
    return _back(x, was_np)


def make_cartesian_mask(
    h: int,
    w: int,
    sampling_rate: float,
    center_fraction: float = 0.08,
    seed: int = 0,
) -> SamplingMask:
    """Sample whole phase-encode rows: a central block plus uniformly drawn rows.

    ``round(center_fraction * h)`` contiguous rows around ``h // 2`` are always
    kept; the rest are drawn without replacement until ``round(sampling_rate * h)``
    rows are sampled.
    """
    if not 0.0 < sampling_rate <= 1.0:
        raise ParameterError(f"sampling_rate must lie in (0, 1], got {sampling_rate}")
    if not 0.0 <= center_fraction <= sampling_rate:
        raise ParameterError(
            f"center_fraction must lie in [0, sampling_rate={sampling_rate}], got {center_fraction}"
        )
    if h < 1 or w < 1:
        raise ParameterError(f"mask dimensions must be positive, got {h}x{w}")
    if h * sampling_rate < 1:
        raise InfeasibleMaskError(f"{h} rows at rate {sampling_rate} samples no row")

    n_rows = min(h, max(1, round_half_up(sampling_rate * h)))
    n_center = min(n_rows, round_half_up(center_fraction * h))
    start = h // 2 - n_center // 2
    center = np.arange(start, start + n_center)
    rest = np.setdiff1d(np.arange(h), center)

    rng = np.random.default_rng(seed)
    drawn = rng.choice(rest, size=n_rows - n_center, replace=False)

    mask = np.zeros((h, w), dtype=np.uint8)
    mask[center, :] = 1
    mask[drawn, :] = 1
    return SamplingMask(mask, float(sampling_rate), float(center_fraction), int(seed))


def _check_shapes(x: torch.Tensor, m: torch.Tensor) -> None:
    if tuple(x.shape[-2:]) != tuple(m.shape[-2:]):
        raise ShapeError(f"image {tuple(x.shape)} and mask {tuple(m.shape)} disagree")


def forward_undersample(x, mask) -> KSpaceMeasurement:
    """Return ``mask * F(x)``, the sampled k-space of an image."""
    t, was_np = _to_tensor(x)
    k = fft2c(t)
    m = _mask_like(mask, k)
    _check_shapes(k, m)
    y = k * m
    return KSpaceMeasurement(_back(y, was_np), _back(m, was_np))


def zero_filled(y: KSpaceMeasurement):
    """Adjoint of :func:`forward_undersample`: ``F^H`` of the zero-padded values."""
    v, was_np = _to_tensor(y.values)
    m = _mask_like(y.mask, v)
    return _back(ifft2c(v * m), was_np)


def data_fidelity(x_rec, y: KSpaceMeasurement, noise_weight: float = math.inf):
    """Re-impose measured k-space values on a reconstruction.

    At sampled positions the output k-space is ``(k + w * y) / (1 + w)``;
    ``w = inf`` replaces them by ``y`` outright. Differentiable in ``x_rec``.
    """
    if noise_weight < 0 or math.isnan(noise_weight):
        raise ParameterError(f"noise_weight must be non-negative, got {noise_weight}")
    t, was_np = _to_tensor(x_rec)
    v, _ = _to_tensor(y.values)
    k = fft2c(t)
    v = v.to(device=k.device, dtype=k.dtype)
    m = _mask_like(y.mask, k)
    _check_shapes(k, m)
    if tuple(k.shape[-2:]) != tuple(v.shape[-2:]):
        raise ShapeError(f"reconstruction {tuple(k.shape)} and measurement {tuple(v.shape)} disagree")
    if math.isinf(noise_weight):
        k_dc = (1 - m) * k + m * v
    else:
        k_dc = (1 - m) * k + m * (k + noise_weight * v) / (1 + noise_weight)
    return _back(ifft2c(k_dc), was_np)


def to_channels(x: torch.Tensor) -> torch.Tensor:
    """Complex (B, H, W) -> real (B, 2, H, W) with (real, imag) channels."""
    return torch.stack((x.real, x.imag), dim=-3)


def from_channels(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`to_channels`."""
    return torch.complex(x[..., 0, :, :], x[..., 1, :, :])
