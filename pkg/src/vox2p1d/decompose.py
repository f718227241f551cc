"""Neighbor-offset decomposition and 2D slicing of 3D volumes.

A volume with even dims splits losslessly into 8 half-resolution
sub-volumes indexed by the parity offset k = dx*4 + dy*2 + dz with
(dx, dy, dz) in {0,1}^3; sub-volume k holds parent[2i+dx, 2j+dy, 2l+dz].
Each sub-volume is then cut into axial (z), coronal (y), or sagittal (x)
slice stacks and adapted to whatever 2D extractor sits downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, DataError
from .volumes import BrainVolume, Metric


class View(str, Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"


VIEWS = (View.AXIAL, View.CORONAL, View.SAGITTAL)

OFFSETS = tuple(
    (dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)
)  # index k = dx*4 + dy*2 + dz


@dataclass(frozen=True)
class SubVolumeSet:
    subject_id: str
    metric: Metric
    subvolumes: tuple[np.ndarray, ...]  # 8 congruent rank-3 arrays, index k


@dataclass(frozen=True)
class SliceStack:
    """Slices of one sub-volume along one view, in anatomical order.

    ``slices[n]`` is the 2D plane at anatomical index n:
    axial (x, y) at z=n, coronal (x, z) at y=n, sagittal (y, z) at x=n.
    """

    view: View
    slices: np.ndarray  # (N, a, b)

    @property
    def count(self) -> int:
        return self.slices.shape[0]


@dataclass(frozen=True)
class ExtractorDescriptor:
    """Contract of the 2D feature extractor the slices are adapted for.

    The default intensity range keeps zero-valued background at zero, so
    mostly-background slices yield small extractor activations; the
    slice/channel selection downstream depends on that monotonicity.
    """

    input_height: int
    input_width: int
    channel_mode: str = "replicate3"  # or "single"
    intensity_range: tuple[float, float] = (0.0, 1.0)
    out_dims: tuple[int, int, int] = (3, 3, 128)  # (W, H, CH)

    def __post_init__(self):
        if self.input_height < 1 or self.input_width < 1:
            raise ConfigError("extractor input dims must be positive")
        lo, hi = self.intensity_range
        if not lo < hi:
            raise ConfigError(f"invalid intensity range ({lo}, {hi})")
        if any(d < 1 for d in self.out_dims):
            raise ConfigError(f"invalid out_dims {self.out_dims}")
        if self.channel_mode not in ("replicate3", "single"):
            raise ConfigError(f"unknown channel_mode {self.channel_mode!r}")

    @property
    def channels(self) -> int:
        return 3 if self.channel_mode == "replicate3" else 1


# Stands in for a large pre-trained model's output geometry (3x3x1536
# final feature maps); used by tests and available in configs.
REFERENCE_DESCRIPTOR = ExtractorDescriptor(
    input_height=48, input_width=48, out_dims=(3, 3, 1536)
)

# Desk-scale default for phantom experiments.
DEFAULT_DESCRIPTOR = ExtractorDescriptor(input_height=32, input_width=32)


def decompose8(v: BrainVolume) -> SubVolumeSet:
    """Split a volume with even dims into its 8 parity sub-volumes."""
    if any(d % 2 for d in v.voxels.shape):
        raise DataError(
            f"decompose8 requires even dims, got {v.voxels.shape}; apply pad_to_even"
        )
    subs = tuple(
        np.ascontiguousarray(v.voxels[dx::2, dy::2, dz::2]) for dx, dy, dz in OFFSETS
    )
    return SubVolumeSet(subject_id=v.subject_id, metric=v.metric, subvolumes=subs)


def reassemble8(s: SubVolumeSet) -> np.ndarray:
    """Inverse of decompose8; used by the partition tests."""
    hx, hy, hz = s.subvolumes[0].shape
    out = np.empty((2 * hx, 2 * hy, 2 * hz), dtype=s.subvolumes[0].dtype)
    for k, (dx, dy, dz) in enumerate(OFFSETS):
        out[dx::2, dy::2, dz::2] = s.subvolumes[k]
    return out


def extract_view_slices(subvolume: np.ndarray, view: View) -> SliceStack:
    """Cut a rank-3 array into a slice stack for one anatomical view."""
    if subvolume.ndim != 3:
        raise DataError(f"expected rank-3 array, got rank {subvolume.ndim}")
    if view is View.AXIAL:
        stack = np.moveaxis(subvolume, 2, 0)  # (z, x, y)
    elif view is View.CORONAL:
        stack = np.moveaxis(subvolume, 1, 0)  # (y, x, z)
    else:
        stack = subvolume  # (x, y, z)
    return SliceStack(view=view, slices=np.ascontiguousarray(stack))


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def adapt_stack(stack: np.ndarray, d: ExtractorDescriptor) -> np.ndarray:
    """Resize, rescale, and channel-expand a stack of 2D slices.

    (N, h, w) in [0,1]  ->  (N, input_height, input_width, channels) in
    the extractor's intensity range, bilinear corner-aligned resize.
    """
    if stack.ndim != 3 or 0 in stack.shape:
        raise DataError(f"expected non-empty (N, h, w) stack, got {stack.shape}")
    n, h, w = stack.shape
    rows = _interp_matrix(h, d.input_height)
    cols = _interp_matrix(w, d.input_width)
    resized = np.einsum(
        "oi,nij,pj->nop", rows, stack.astype(np.float64), cols, optimize=True
    )
    lo, hi = d.intensity_range
    scaled = lo + resized * (hi - lo)
    out = np.repeat(scaled[..., None], d.channels, axis=-1)
    return np.ascontiguousarray(out.astype(np.float32))


def adapt_slice(slice2d: np.ndarray, d: ExtractorDescriptor) -> np.ndarray:
    """Single-slice convenience wrapper around adapt_stack."""
    return adapt_stack(slice2d[None, ...], d)[0]
