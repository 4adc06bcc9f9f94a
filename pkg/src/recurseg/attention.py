"""Gaussian attention: filterbank construction, patch extraction, re-projection.

A predicted box is a 7-vector [center x/y (normalized to [-1,1]), log size
x/y (fraction of image), log kernel stddev x/y (pixels), magnification].
From it we build per-axis filterbanks: patch column i reads the image through
a Gaussian centered at mu_x[i]. Extraction is the bilinear form F_Y^T X F_X;
re-projection runs the transposed filters back to image space, scales by the
magnification and shifts by a fixed suppression constant before a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

SIGMA_FLOOR = 0.05
NORM_EPS = 1e-8


@dataclass
class PatchGeometry:
    patch_h: int
    patch_w: int

    def __post_init__(self):
        if self.patch_h <= 0 or self.patch_w <= 0:
            raise ValueError(f"patch dims must be positive, got {self.patch_h}x{self.patch_w}")


@dataclass
class BoxParams:
    """Raw box network outputs, each a scalar tensor."""

    g_tilde_x: Tensor
    g_tilde_y: Tensor
    log_delta_x: Tensor
    log_delta_y: Tensor
    log_sigma_x: Tensor
    log_sigma_y: Tensor
    gamma: Tensor

    @staticmethod
    def from_vector(v: Tensor) -> "BoxParams":
        if v.shape != (7,):
            raise ShapeError(f"box parameter vector must have 7 entries, got {v.shape}")
        return BoxParams(
            g_tilde_x=v[0],
            g_tilde_y=v[1],
            log_delta_x=v[2],
            log_delta_y=v[3],
            log_sigma_x=v[4],
            log_sigma_y=v[5],
            gamma=v[6],
        )


@dataclass
class DenormalizedBox:
    """Box in pixel units: center, size, kernel stddev per axis, magnification."""

    g_x: Tensor
    g_y: Tensor
    delta_x: Tensor
    delta_y: Tensor
    sigma_x: Tensor
    sigma_y: Tensor
    gamma: Tensor


@dataclass
class FilterBank:
    f_x: Tensor  # (W, patch_w)
    f_y: Tensor  # (H, patch_h)
    mu_x: Tensor
    mu_y: Tensor
    normalized: bool


def denormalize_box(b: BoxParams, img_h: int, img_w: int) -> DenormalizedBox:
    """Map normalized box outputs to pixel units; stddevs floored at 0.05 px."""
    if img_h <= 0 or img_w <= 0:
        raise ValueError(f"image dims must be positive, got {img_h}x{img_w}")
    floor = ad.constant(SIGMA_FLOOR)
    return DenormalizedBox(
        g_x=(b.g_tilde_x + 1.0) * (img_w / 2.0),
        g_y=(b.g_tilde_y + 1.0) * (img_h / 2.0),
        delta_x=ad.exp(b.log_delta_x) * img_w,
        delta_y=ad.exp(b.log_delta_y) * img_h,
        sigma_x=ad.maximum(ad.exp(b.log_sigma_x), floor),
        sigma_y=ad.maximum(ad.exp(b.log_sigma_y), floor),
        gamma=b.gamma,
    )


def _axis_bank(center: Tensor, extent: Tensor, sigma: Tensor, n_img: int, n_patch: int, normalized: bool):
    # patch cell i samples the image at center + (extent+1) * (i - n/2 + 0.5)/n
    offsets = ad.constant((np.arange(n_patch) - n_patch / 2.0 + 0.5) / n_patch)
    mu = center + (extent + 1.0) * offsets
    a = ad.constant(np.arange(n_img, dtype=np.float64).reshape(n_img, 1))
    diff = a - ad.reshape(mu, (1, n_patch))
    dens = ad.exp(-(diff * diff) / (sigma * sigma * 2.0)) * (1.0 / (math.sqrt(2.0 * math.pi)) / sigma)
    if normalized:
        colsum = ad.sum_(dens, axis=0, keepdims=True)
        dens = dens / ad.maximum(colsum, ad.constant(NORM_EPS))
    return dens, mu


def build_filterbank(
    box: DenormalizedBox,
    geom: PatchGeometry,
    img_h: int,
    img_w: int,
    normalized: bool = True,
) -> FilterBank:
    for name, s in (("sigma_x", box.sigma_x), ("sigma_y", box.sigma_y)):
        if float(np.min(s.value)) <= 0.0:
            raise ValueError(f"{name} must be positive, got {float(np.min(s.value))}")
    f_x, mu_x = _axis_bank(box.g_x, box.delta_x, box.sigma_x, img_w, geom.patch_w, normalized)
    f_y, mu_y = _axis_bank(box.g_y, box.delta_y, box.sigma_y, img_h, geom.patch_h, normalized)
    return FilterBank(f_x=f_x, f_y=f_y, mu_x=mu_x, mu_y=mu_y, normalized=normalized)


def extract_patch(img: Tensor, fb: FilterBank) -> Tensor:
    """Read the attention window out of the image: per channel F_Y^T X F_X."""
    if img.ndim != 3:
        raise ShapeError(f"extract_patch: image must be (H,W,C), got {img.shape}")
    h, w, c = img.shape
    if fb.f_y.shape[0] != h or fb.f_x.shape[0] != w:
        raise ShapeError(
            f"extract_patch: filterbank for {fb.f_y.shape[0]}x{fb.f_x.shape[0]} image, got {h}x{w}"
        )
    ph, pw = fb.f_y.shape[1], fb.f_x.shape[1]
    fyt = ad.transpose2d(fb.f_y)
    cols = [ad.reshape(ad.matmul(ad.matmul(fyt, img[:, :, ch]), fb.f_x), (ph, pw, 1)) for ch in range(c)]
    return cols[0] if c == 1 else ad.concat(cols, axis=-1)


def reproject_linear(patch: Tensor, fb: FilterBank) -> Tensor:
    """Adjoint of extraction: F_Y P F_X^T, patch (ph,pw,1) or (ph,pw) -> (H,W,1)."""
    p = patch[:, :, 0] if patch.ndim == 3 else patch
    if p.ndim != 2:
        raise ShapeError(f"reproject_linear: patch must be 2d or single-channel 3d, got {patch.shape}")
    if fb.f_y.shape[1] != p.shape[0] or fb.f_x.shape[1] != p.shape[1]:
        raise ShapeError(
            f"reproject_linear: patch {p.shape} does not match filterbank "
            f"{fb.f_y.shape[1]}x{fb.f_x.shape[1]}"
        )
    out = ad.matmul(ad.matmul(fb.f_y, p), ad.transpose2d(fb.f_x))
    h, w = fb.f_y.shape[0], fb.f_x.shape[0]
    return ad.reshape(out, (h, w, 1))


def reproject_patch(patch: Tensor, fb: FilterBank, gamma, beta: float) -> Tensor:
    """Write a patch-space map back to image space, squashed to (0,1).

    Pixels with no filter support land at sigmoid(-beta), suppressing
    everything outside the attention window.
    """
    g = gamma if isinstance(gamma, Tensor) else ad.constant(gamma)
    return ad.sigmoid(g * reproject_linear(patch, fb) - beta)


def box_mask(fb: FilterBank, gamma, beta: float) -> Tensor:
    """Soft indicator of the attention window: re-projection of an all-ones patch."""
    ones = ad.constant(np.ones((fb.f_y.shape[1], fb.f_x.shape[1])))
    return reproject_patch(ones, fb, gamma, beta)
