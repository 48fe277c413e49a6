"""Synthetic multi-center RF frames with controllable distribution shift.

Tissue is modelled as Rayleigh speckle: the envelope of two independent
Gaussian-filtered white-noise fields. The filter width sets the speckle
grain (autocorrelation length). Cancer tissue has a finer grain than benign
tissue, so the class signal lives in second-order statistics, not in mean
intensity. Each center applies its own nuisance transform:

* ``gain`` scales the whole frame,
* ``attenuation_slope`` darkens it with depth,
* ``speckle_scale`` adds uncorrelated electronic speckle,
* ``texture_frequency`` sets the benign grain (``1 / f`` mm), shifting both
  classes together, which is what overlaps with the class signal.

Patients additionally jitter the texture frequency around their center's
value.
"""
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from denem.data.geometry import PatchSpec, RFFrame, extract_patches

GLEASON_GRADES = (7, 8, 9, 10)
GLEASON_WEIGHTS = (675, 134, 60, 11)


@dataclass(frozen=True)
class CenterShiftParams:
    center_id: str
    gain: float = 1.0
    speckle_scale: float = 0.3
    texture_frequency: float = 2.0  # cycles per mm
    attenuation_slope: float = 0.5  # nepers over the full frame depth

    def __post_init__(self):
        for name in ("gain", "speckle_scale", "texture_frequency", "attenuation_slope"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class SynthConfig:
    px_per_mm: float = 51.2
    frame_mm: Tuple[float, float] = (28.0, 46.0)
    patch: PatchSpec = field(default_factory=PatchSpec)
    needle_width_mm: float = 4.0
    needle_length_mm: float = 18.0
    max_needle_angle_deg: float = 15.0
    cancer_grain_ratio: float = 0.7
    patient_jitter: float = 0.08
    min_involvement: float = 0.1
    max_patches_per_core: Optional[int] = None

    @classmethod
    def desk(cls) -> "SynthConfig":
        return cls(px_per_mm=12.8, patch=PatchSpec.desk(), max_patches_per_core=16)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_mm"] = list(self.frame_mm)
        d["patch"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.patch).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        p = d.pop("patch")
        patch = PatchSpec(tuple(p["patch_mm"]), tuple(p["stride_mm"]), p["overlap_threshold"], tuple(p["resize_to"]))
        return cls(patch=patch, frame_mm=tuple(d.pop("frame_mm")), **d)


@dataclass
class BiopsyCore:
    core_id: str
    patient_id: str
    center_id: str
    patches: np.ndarray  # (n, H, W) float32
    label: int
    involvement: float
    gleason: Optional[int] = None

    def __post_init__(self):
        if len(self.patches) == 0:
            raise ValueError(f"core {self.core_id} has no patches")
        if self.label not in (0, 1):
            raise ValueError(f"core {self.core_id}: label must be 0 or 1")
        if not 0 <= self.involvement <= 1:
            raise ValueError(f"core {self.core_id}: involvement must lie in [0, 1]")

    def same_as(self, other: "BiopsyCore") -> bool:
        return (
            (self.core_id, self.patient_id, self.center_id, self.label, self.involvement, self.gleason)
            == (other.core_id, other.patient_id, other.center_id, other.label, other.involvement, other.gleason)
            and self.patches.dtype == other.patches.dtype
            and np.array_equal(self.patches, other.patches)
        )


@dataclass
class CoreDraw:
    """Everything random about one core, drawn before any pixels are made."""

    core_id: str
    patient_id: str
    label: int
    involvement: float
    gleason: Optional[int]
    texture_frequency: float
    needle_center_mm: Tuple[float, float]
    needle_angle: float
    cancer_start: float  # along-needle offset of the cancer segment, mm
    pixel_seed: int


def core_identity(center_id: str, patient: int, core: int) -> Tuple[str, str]:
    pid = f"{center_id}-p{patient:03d}"
    return f"{pid}-c{core:02d}", pid


def _derived_rng(seed: int, center_id: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(center_id.encode()), *keys]))


def draw_cores(params: CenterShiftParams, n_patients: int, cores_per_patient: int, cancer_rate: float,
               seed: int, config: SynthConfig) -> List[CoreDraw]:
    if not 0 <= cancer_rate <= 1:
        raise ValueError(f"cancer_rate must lie in [0, 1], got {cancer_rate}")
    if n_patients < 1 or cores_per_patient < 1:
        raise ValueError("need at least one patient and one core per patient")
    depth, width = config.frame_mm
    half = config.needle_length_mm / 2
    draws = []
    weights = np.array(GLEASON_WEIGHTS, float) / sum(GLEASON_WEIGHTS)
    for pi in range(n_patients):
        prng = _derived_rng(seed, params.center_id, pi)
        tf = params.texture_frequency * float(np.exp(config.patient_jitter * prng.standard_normal()))
        for ci in range(cores_per_patient):
            rng = _derived_rng(seed, params.center_id, pi, ci + 1)
            core_id, pid = core_identity(params.center_id, pi, ci)
            cancer = bool(rng.random() < cancer_rate)
            inv = float(rng.uniform(config.min_involvement, 1.0)) if cancer else 0.0
            gleason = int(rng.choice(GLEASON_GRADES, p=weights)) if cancer else None
            center = (float(rng.uniform(0.3 * depth, 0.7 * depth)), float(rng.uniform(half + 1, width - half - 1)))
            angle = float(np.deg2rad(rng.uniform(-config.max_needle_angle_deg, config.max_needle_angle_deg)))
            start = float(rng.uniform(0, config.needle_length_mm * (1 - inv)))
            draws.append(CoreDraw(core_id, pid, int(cancer), inv, gleason, tf, center, angle, start,
                                  int(rng.integers(2**63 - 1))))
    return draws


def _needle_coords(draw: CoreDraw, shape, px_per_mm):
    """Along- and across-needle coordinates (mm) of every pixel."""
    h, w = shape
    z = (np.arange(h) + 0.5)[:, None] / px_per_mm
    x = (np.arange(w) + 0.5)[None, :] / px_per_mm
    dz, dx = z - draw.needle_center_mm[0], x - draw.needle_center_mm[1]
    c, s = np.cos(draw.needle_angle), np.sin(draw.needle_angle)
    along = dx * c + dz * s
    across = -dx * s + dz * c
    return along, across


def _speckle(rng: np.random.Generator, shape, grain_px: float, box=None) -> np.ndarray:
    """Unit-scale Rayleigh envelope with Gaussian autocorrelation of width ``grain_px``.

    With ``box = (r0, r1, c0, c1)`` only that region is filtered and returned.
    The full noise fields are still drawn, so the generator advances exactly as
    for a full frame, and the filter reads a margin of one kernel radius around
    the box, so every returned value equals the full-frame one.
    """
    # variance of Gaussian-filtered unit white noise in 2-D
    scale = 2 * grain_px * np.sqrt(np.pi)
    noise = [rng.standard_normal(shape) for _ in range(2)]
    if box is None:
        return np.hypot(*(ndimage.gaussian_filter(n, grain_px, mode="reflect") * scale for n in noise))
    r0, r1, c0, c1 = box
    radius = int(4.0 * grain_px + 0.5)  # gaussian_filter's default truncation
    e0, e1 = max(r0 - radius, 0), min(r1 + radius, shape[0])
    f0, f1 = max(c0 - radius, 0), min(c1 + radius, shape[1])
    inner = (slice(r0 - e0, r1 - e0), slice(c0 - f0, c1 - f0))
    return np.hypot(*(ndimage.gaussian_filter(n[e0:e1, f0:f1], grain_px, mode="reflect")[inner] * scale
                      for n in noise))


def _needle_box(needle: np.ndarray, margin: int):
    rows, cols = np.flatnonzero(needle.any(1)), np.flatnonzero(needle.any(0))
    h, w = needle.shape
    return (max(rows[0] - margin, 0), min(rows[-1] + 1 + margin, h),
            max(cols[0] - margin, 0), min(cols[-1] + 1 + margin, w))


def render_frame(draw: CoreDraw, params: CenterShiftParams, config: SynthConfig,
                 crop_to_needle: bool = False) -> Tuple[RFFrame, np.ndarray]:
    """The RF frame of one core and its boolean cancer-tissue mask.

    ``crop_to_needle`` renders only the pixels that a needle-covering window
    can reach, leaving the rest of the frame at zero. Patch extraction gives
    bitwise the same patches either way; it is just much cheaper.
    """
    depth, width = config.frame_mm
    shape = (int(round(depth * config.px_per_mm)), int(round(width * config.px_per_mm)))
    rng = np.random.default_rng(draw.pixel_seed)
    grain_px = config.px_per_mm / draw.texture_frequency

    along, across = _needle_coords(draw, shape, config.px_per_mm)
    half_len, half_w = config.needle_length_mm / 2, config.needle_width_mm / 2
    needle = (np.abs(along) <= half_len) & (np.abs(across) <= half_w)
    seg_lo = -half_len + draw.cancer_start
    seg_hi = seg_lo + draw.involvement * config.needle_length_mm
    cancer = (draw.involvement > 0) & (along >= seg_lo) & (along <= seg_hi) & (np.abs(across) <= half_w + 1.0)

    box = None
    if crop_to_needle and needle.any():
        margin = int(np.ceil(max(config.patch.patch_mm) * config.px_per_mm)) + 1
        box = _needle_box(needle, margin)
    region = (slice(None), slice(None)) if box is None else (slice(box[0], box[1]), slice(box[2], box[3]))

    benign = _speckle(rng, shape, grain_px, box)
    malignant = _speckle(rng, shape, grain_px * config.cancer_grain_ratio, box)
    electronic = np.hypot(rng.standard_normal(shape)[region], rng.standard_normal(shape)[region])

    tissue = np.where(cancer[region], malignant, benign)
    z = (np.arange(shape[0]) + 0.5)[:, None] / shape[0]
    envelope = params.gain * np.exp(-params.attenuation_slope * z[region[0]]) * (tissue + params.speckle_scale * electronic)
    full = np.zeros(shape, dtype=np.float32)
    full[region] = envelope
    return RFFrame(full, needle, (depth, width)), cancer


def core_from_draw(draw: CoreDraw, params: CenterShiftParams, config: SynthConfig) -> BiopsyCore:
    frame, _ = render_frame(draw, params, config, crop_to_needle=True)
    patches = extract_patches(frame, config.patch)
    if not patches:
        raise RuntimeError(f"needle region of {draw.core_id} yields no patches; widen the needle band")
    arr = np.stack([p for p, _ in patches]).astype(np.float32)
    k = config.max_patches_per_core
    if k is not None and len(arr) > k:
        arr = arr[np.linspace(0, len(arr) - 1, k).round().astype(int)]
    return BiopsyCore(draw.core_id, draw.patient_id, params.center_id, arr, draw.label, draw.involvement,
                      draw.gleason)


def synthesize_center(params: CenterShiftParams, n_patients: int, cores_per_patient: int, cancer_rate: float,
                      seed: int, config: SynthConfig = SynthConfig()) -> List[BiopsyCore]:
    """Deterministic cores for one center; a pure function of its arguments."""
    return [core_from_draw(d, params, config)
            for d in draw_cores(params, n_patients, cores_per_patient, cancer_rate, seed, config)]


def find_draw(core_id: str, params: CenterShiftParams, n_patients: int, cores_per_patient: int,
              cancer_rate: float, seed: int, config: SynthConfig) -> CoreDraw:
    for d in draw_cores(params, n_patients, cores_per_patient, cancer_rate, seed, config):
        if d.core_id == core_id:
            return d
    raise KeyError(f"no core {core_id!r} in center {params.center_id}")


DEFAULT_CENTERS: Sequence[CenterShiftParams] = (
    CenterShiftParams("C1", gain=1.0, speckle_scale=0.30, texture_frequency=2.0, attenuation_slope=0.5),
    CenterShiftParams("C2", gain=1.4, speckle_scale=0.45, texture_frequency=2.3, attenuation_slope=0.8),
    CenterShiftParams("C3", gain=0.7, speckle_scale=0.25, texture_frequency=1.8, attenuation_slope=0.3),
    CenterShiftParams("C4", gain=1.2, speckle_scale=0.60, texture_frequency=2.1, attenuation_slope=1.0),
    CenterShiftParams("C5", gain=0.9, speckle_scale=0.35, texture_frequency=2.5, attenuation_slope=0.6),
)


def with_gain(params: CenterShiftParams, gain: float, center_id: Optional[str] = None) -> CenterShiftParams:
    return replace(params, gain=gain, center_id=center_id or params.center_id)
