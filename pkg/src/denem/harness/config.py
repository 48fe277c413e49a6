"""Experiment configuration: one dataclass tree, loadable from YAML or JSON."""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Tuple

import yaml

from denem.adaptation import LR_GRID, STEPS_GRID, AdaptationConfig
from denem.data.synthetic import DEFAULT_CENTERS, CenterShiftParams, SynthConfig
from denem.ensemble import EncoderArch, NormPolicy

# method -> (checkpoint variant it evaluates, adaptation engine or None)
METHODS = {
    "resnet10": ("single", None),
    "tent": ("single", "tent"),
    "memo": ("single", "memo"),
    "ensemble": ("ensemble", None),
    "ensemble_me": ("ensemble", "marginal_entropy"),
    "ensemble_mi": ("ensemble_mi", None),
    "denem": ("ensemble_mi", "denem"),
}
VARIANTS = ("single", "ensemble", "ensemble_mi")
DESK_PATCHES_PER_CORE = 8
DESK_ADAPTATION = (1e-1, 5)  # (lr_adapt, steps)

# rows in the order of the ablation table, with its check-mark columns
ABLATION_ROWS = (
    ("resnet10", {"group_norm": True, "ensemble": False, "mutual_info": False, "test_adapt": False}),
    ("ensemble", {"group_norm": True, "ensemble": True, "mutual_info": False, "test_adapt": False}),
    ("ensemble_mi", {"group_norm": True, "ensemble": True, "mutual_info": True, "test_adapt": False}),
    ("ensemble_me", {"group_norm": True, "ensemble": True, "mutual_info": False, "test_adapt": True}),
    ("denem", {"group_norm": True, "ensemble": True, "mutual_info": True, "test_adapt": True}),
)


@dataclass
class DataConfig:
    # full-scale defaults follow the clinical cohort size: ~139 patients per
    # center, ~10 cores per patient, ~13% cancerous cores
    n_patients: int = 139
    cores_per_patient: int = 10
    cancer_rate: float = 0.133
    centers: List[CenterShiftParams] = field(default_factory=lambda: list(DEFAULT_CENTERS))
    synth: SynthConfig = field(default_factory=SynthConfig)
    val_fraction: float = 0.25


@dataclass
class ExperimentConfig:
    method: str = "denem"
    norm: NormPolicy = field(default_factory=NormPolicy)
    arch: EncoderArch = field(default_factory=EncoderArch)
    num_members: int = 5
    lam: float = 10.0
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    schedule: str = "cosine_warmup"
    warmup_fraction: float = 0.05
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    adapt_sweep: bool = True
    lr_grid: Tuple[float, ...] = LR_GRID
    steps_grid: Tuple[int, ...] = STEPS_GRID
    memo_augmentations: Tuple[str, ...] = ("hflip", "vflip")
    tent_param_scope: str = "norm_affine_only"
    # choose the balanced-accuracy threshold on validation cores (else 0.5)
    val_threshold: bool = True
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    dataset: str = "dataset"
    out_dir: str = "runs"
    workers: int = 1
    compare_norms: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {sorted(METHODS)}, got {self.method!r}")
        if self.num_members < 2 and METHODS[self.method][0] != "single":
            raise ValueError(f"method {self.method!r} needs num_members >= 2")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.schedule != "cosine_warmup":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        self.norm.check_channels(self.arch.widths)
        size = self.data.synth.patch.resize_to
        if tuple(size) != (self.arch.input_size, self.arch.input_size):
            raise ValueError(f"patches are resized to {tuple(size)} but the encoder expects {self.arch.input_size}")

    @property
    def variant(self) -> str:
        return METHODS[self.method][0]

    def members_for(self, variant: str) -> int:
        return 1 if variant == "single" else self.num_members

    def lambda_for(self, variant: str) -> float:
        return self.lam if variant == "ensemble_mi" else 0.0

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def desk_scale(cfg: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """CPU-sized profile: 5 centers x 20 patients x 2 cores, 64x64 patches, small encoder, 10 epochs."""
    cfg = cfg or ExperimentConfig()
    synth = replace(SynthConfig.desk(), max_patches_per_core=DESK_PATCHES_PER_CORE)
    # the per-fold grid sweep does not fit the CPU budget; these values won it on validation
    adaptation = replace(cfg.adaptation, lr_adapt=DESK_ADAPTATION[0], steps=DESK_ADAPTATION[1])
    return replace(cfg, arch=EncoderArch.desk(), epochs=10, adaptation=adaptation, adapt_sweep=False,
                   data=replace(cfg.data, n_patients=20, cores_per_patient=2, cancer_rate=0.4, synth=synth))


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    kw = {}
    if "norm" in d:
        kw["norm"] = NormPolicy(**d.pop("norm"))
    if "arch" in d:
        kw["arch"] = EncoderArch.from_dict(d.pop("arch"))
    if "adaptation" in d:
        kw["adaptation"] = AdaptationConfig(**d.pop("adaptation"))
    if "data" in d:
        data = dict(d.pop("data"))
        dkw = {}
        if "centers" in data:
            dkw["centers"] = [CenterShiftParams(**c) for c in data.pop("centers")]
        if "synth" in data:
            dkw["synth"] = SynthConfig.from_dict(data.pop("synth"))
        kw["data"] = DataConfig(**dkw, **data)
    for key in ("lr_grid", "steps_grid", "memo_augmentations"):
        if key in d:
            kw[key] = tuple(d.pop(key))
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    return ExperimentConfig(**kw, **d)


def load_config(path=None, overrides: Optional[dict] = None, desk: bool = False) -> ExperimentConfig:
    """Read a YAML/JSON file (or defaults), then apply the desk profile and overrides."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        raw = (json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)) or {}
    cfg = from_dict(raw)
    if desk:
        cfg = desk_scale(cfg)
    if overrides:
        cfg = from_dict({**cfg.to_dict(), **overrides})
    return cfg


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
