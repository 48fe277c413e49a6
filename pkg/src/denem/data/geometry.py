"""Sliding-window patch extraction from an RF frame along the needle trace."""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch
import torch.nn.functional as F

# coverage fractions are exact ratios of pixel counts; this only absorbs float rounding
_COVER_TOL = 1e-9


@dataclass
class RFFrame:
    samples: np.ndarray
    needle_mask: np.ndarray
    physical_size: Tuple[float, float] = (28.0, 46.0)  # depth, width in mm

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.needle_mask = np.asarray(self.needle_mask, dtype=bool)
        if self.samples.ndim != 2:
            raise ValueError(f"RF samples must be 2-D, got shape {self.samples.shape}")
        if self.needle_mask.shape != self.samples.shape:
            raise ValueError(f"needle mask shape {self.needle_mask.shape} != samples shape {self.samples.shape}")

    @property
    def px_per_mm(self) -> Tuple[float, float]:
        h, w = self.samples.shape
        return h / self.physical_size[0], w / self.physical_size[1]


@dataclass(frozen=True)
class PatchSpec:
    patch_mm: Tuple[float, float] = (5.0, 5.0)
    stride_mm: Tuple[float, float] = (1.0, 1.0)
    overlap_threshold: float = 0.60
    resize_to: Tuple[int, int] = (256, 256)

    def __post_init__(self):
        if not 0 < self.overlap_threshold <= 1:
            raise ValueError(f"overlap_threshold must lie in (0, 1], got {self.overlap_threshold}")
        for p, s in zip(self.patch_mm, self.stride_mm):
            if not 0 < s <= p:
                raise ValueError(f"stride {self.stride_mm} must be positive and no larger than patch {self.patch_mm}")

    @classmethod
    def desk(cls) -> "PatchSpec":
        return cls(resize_to=(64, 64))


@dataclass
class WindowGrid:
    """Pixel boxes of every window position and its needle coverage."""

    positions_mm: np.ndarray  # (K, 2) top-left corner, depth/width
    boxes: np.ndarray  # (K, 4) row0, col0, row1, col1
    coverage: np.ndarray  # (K,)
    shape: Tuple[int, int]  # windows along depth, along width


def _axis_starts(extent_mm, patch_mm, stride_mm, px_per_mm, n_px):
    n = int(np.floor((extent_mm - patch_mm) / stride_mm + _COVER_TOL)) + 1
    size = int(round(patch_mm * px_per_mm))
    starts = np.array([int(round(i * stride_mm * px_per_mm)) for i in range(n)])
    starts = np.minimum(starts, n_px - size)
    return starts, size, np.arange(n) * stride_mm


def window_grid(frame: RFFrame, spec: PatchSpec) -> WindowGrid:
    depth, width = frame.physical_size
    if spec.patch_mm[0] > depth or spec.patch_mm[1] > width:
        raise ValueError(f"patch {spec.patch_mm} mm does not fit in a {frame.physical_size} mm frame")
    h, w = frame.samples.shape
    py, px = frame.px_per_mm
    rows, ph, rmm = _axis_starts(depth, spec.patch_mm[0], spec.stride_mm[0], py, h)
    cols, pw, cmm = _axis_starts(width, spec.patch_mm[1], spec.stride_mm[1], px, w)
    if ph < 1 or pw < 1:
        raise ValueError("frame resolution too low for the requested patch size")
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = frame.needle_mask.cumsum(0).cumsum(1)
    r0, c0 = np.meshgrid(rows, cols, indexing="ij")
    r1, c1 = r0 + ph, c0 + pw
    covered = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
    mr, mc = np.meshgrid(rmm, cmm, indexing="ij")
    return WindowGrid(
        positions_mm=np.stack([mr.ravel(), mc.ravel()], 1),
        boxes=np.stack([r0.ravel(), c0.ravel(), r1.ravel(), c1.ravel()], 1),
        coverage=covered.ravel() / float(ph * pw),
        shape=(len(rows), len(cols)),
    )


def resize_windows(windows: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a ``(K, h, w)`` stack; antialiased when shrinking."""
    if windows.shape[0] == 0:
        return np.zeros((0,) + tuple(size), dtype=np.float32)
    if tuple(windows.shape[1:]) == tuple(size):
        return windows.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(windows, dtype=np.float32))[:, None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)
    return out[:, 0].numpy()


def crop_windows(frame: RFFrame, boxes: np.ndarray) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 1, 1), dtype=np.float32)
    return np.stack([frame.samples[r0:r1, c0:c1] for r0, c0, r1, c1 in boxes]).astype(np.float32)


def extract_patches(frame: RFFrame, spec: PatchSpec = PatchSpec()) -> List[Tuple[np.ndarray, Tuple[float, float]]]:
    """Needle-region patches as ``(array, (depth_mm, width_mm))`` pairs.

    A window is kept when at least ``spec.overlap_threshold`` of its area lies
    inside the needle mask.
    """
    grid = window_grid(frame, spec)
    keep = grid.coverage >= spec.overlap_threshold - _COVER_TOL
    patches = resize_windows(crop_windows(frame, grid.boxes[keep]), spec.resize_to)
    return [(p, (float(r), float(c))) for p, (r, c) in zip(patches, grid.positions_mm[keep])]
