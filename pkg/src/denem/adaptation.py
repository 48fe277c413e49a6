"""Episodic test-time adaptation: DEnEM, TENT and MEMO.

Every engine adapts a model on the patches of a single biopsy core, records
the predictions of the adapted model and then puts the parameters back
exactly as they were, so one core never influences the next. The optimizer
is plain SGD, created fresh for every episode.
"""
import contextlib
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from denem import objectives as obj
from denem.ensemble import EnsembleModel, forward_marginal, restore, snapshot

PARAM_SCOPES = ("all", "norm_affine_only")
AUGMENTATIONS = ("identity", "hflip", "vflip", "crop", "affine")
LR_GRID = (1e-1, 1e-2, 1e-3)
STEPS_GRID = (1, 5)


@dataclass
class AdaptationConfig:
    lr_adapt: float = 1e-3
    steps: int = 1
    lambda_adapt: float = 10.0
    optimizer: str = "sgd"
    param_scope: str = "all"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_adapt <= 1:
            raise ValueError(f"lr_adapt must lie in (0, 1], got {self.lr_adapt}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f"steps must be a nonnegative integer, got {self.steps}")
        if not self.lambda_adapt >= 0:
            raise ValueError(f"lambda_adapt must be >= 0, got {self.lambda_adapt}")
        if self.optimizer != "sgd":
            raise ValueError(f"only the 'sgd' optimizer is supported, got {self.optimizer!r}")
        if self.param_scope not in PARAM_SCOPES:
            raise ValueError(f"param_scope must be one of {PARAM_SCOPES}, got {self.param_scope!r}")
        self.steps = int(self.steps)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CoreBatch:
    patches: torch.Tensor
    core_id: str = ""

    def __post_init__(self):
        if not isinstance(self.patches, torch.Tensor):
            self.patches = torch.as_tensor(self.patches, dtype=torch.float32)
        if self.patches.ndim == 3:
            self.patches = self.patches.unsqueeze(1)
        if self.patches.ndim != 4 or self.patches.shape[0] < 1:
            raise ValueError(f"a core needs at least one patch, got shape {tuple(self.patches.shape)}")

    @property
    def n(self) -> int:
        return self.patches.shape[0]


@dataclass
class AdaptedPrediction:
    patch_probs: torch.Tensor
    objective_trace: List[float] = field(default_factory=list)
    restored: bool = True
    aborted: bool = False

    @property
    def core_score(self) -> float:
        return core_probability(self.patch_probs)


def core_probability(patch_probs: torch.Tensor, positive: int = 1) -> float:
    if patch_probs.shape[0] < 1:
        raise ValueError("cannot score an empty core")
    return patch_probs[:, positive].mean().item()


@torch.no_grad()
def predict_core(model: EnsembleModel, core) -> float:
    """Mean over patches of the member-averaged cancer probability."""
    if not isinstance(core, CoreBatch):
        core = CoreBatch(core)
    return core_probability(forward_marginal(model, core.patches))


def scope_parameters(model: nn.Module, scope: str) -> List[nn.Parameter]:
    if scope == "all":
        return list(model.parameters())
    if scope == "norm_affine_only":
        norms = (nn.GroupNorm, nn.BatchNorm2d)
        return [p for m in model.modules() if isinstance(m, norms) for p in m.parameters(recurse=False)]
    raise ValueError(f"unknown param_scope {scope!r}")


@contextlib.contextmanager
def episode(model: EnsembleModel):
    """Snapshot ``model`` on entry and restore it bitwise on exit."""
    snap = snapshot(model)
    try:
        yield model
    finally:
        restore(model, snap)


# objective(grad) -> (loss, marginal patch probabilities or None)
Objective = Callable[[], Tuple[torch.Tensor, Optional[torch.Tensor]]]


def run_episode(model: EnsembleModel, objective: Objective, predict: Callable[[], torch.Tensor],
                cfg: AdaptationConfig, restore_after: bool = True) -> AdaptedPrediction:
    """Take ``cfg.steps`` SGD steps on ``objective`` and report predictions.

    ``objective`` returns the loss and, when it is a by-product of the same
    forward pass, the patch predictions; otherwise ``predict`` is called.
    The trace holds the objective before the first step and after each step.
    A non-finite objective aborts the episode: parameters are restored and
    the un-adapted predictions are returned with ``aborted`` set.
    """
    snap = snapshot(model)
    was_training = model.training
    flags = [p.requires_grad for p in model.parameters()]
    params = scope_parameters(model, cfg.param_scope)
    in_scope = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in in_scope)
    model.train()
    trace: List[float] = []
    aborted = False
    probs = None
    try:
        opt = torch.optim.SGD(params, lr=cfg.lr_adapt, foreach=True)
        for _ in range(cfg.steps):
            loss, _ = objective()
            trace.append(loss.item())
            if not math.isfinite(trace[-1]):
                aborted = True
                break
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        if not aborted:
            with torch.no_grad():
                loss, probs = objective()
                trace.append(loss.item())
                if probs is None:
                    probs = predict()
            aborted = not math.isfinite(trace[-1]) or not torch.isfinite(probs).all().item()
        if aborted:
            restore(model, snap)
            with torch.no_grad():
                probs = predict()
            trace += [float("nan")] * (cfg.steps + 1 - len(trace))
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
        model.train(was_training)
        if restore_after:
            restore(model, snap)
    return AdaptedPrediction(probs.detach(), trace, restored=restore_after or aborted, aborted=aborted)


def _marginal_predictor(model, patches):
    return lambda: forward_marginal(model, patches)


def adapt_core_denem(model: EnsembleModel, core: CoreBatch, cfg: AdaptationConfig,
                     restore_after: bool = True) -> AdaptedPrediction:
    """Minimise marginal entropy + ``lambda_adapt`` x member MI on one core."""
    if model.num_members < 2:
        raise ValueError("DEnEM adaptation needs at least two ensemble members")
    x = core.patches

    def objective():
        members = model.member_probs(x)
        return obj.adaptation_loss(members, cfg.lambda_adapt), obj.marginal_probability(members)

    return run_episode(model, objective, _marginal_predictor(model, x), cfg, restore_after)


def adapt_core_tent(model: EnsembleModel, core: CoreBatch, cfg: AdaptationConfig,
                    restore_after: bool = True) -> AdaptedPrediction:
    """Each member minimises the mean entropy of its own predictions."""
    x = core.patches

    def objective():
        members = model.member_probs(x)
        loss = sum(obj.mean_entropy(p) for p in members)
        return loss, obj.marginal_probability(members)

    return run_episode(model, objective, _marginal_predictor(model, x), cfg, restore_after)


def _affine_views(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def augment(x: torch.Tensor, name: str, generator: torch.Generator) -> torch.Tensor:
    """One random view of a patch batch ``(n, 1, H, W)``."""
    n = x.shape[0]

    def uniform(lo, hi):
        return lo + (hi - lo) * torch.rand(n, generator=generator, dtype=x.dtype)

    if name == "identity":
        return x
    if name == "hflip":
        return x.flip(-1)
    if name == "vflip":
        return x.flip(-2)
    theta = torch.zeros(n, 2, 3, dtype=x.dtype)
    if name == "crop":
        # zoom into a random window covering 70-90% of each side
        s = uniform(0.7, 0.9)
        theta[:, 0, 0] = theta[:, 1, 1] = s
        theta[:, 0, 2] = (1 - s) * uniform(-1, 1)
        theta[:, 1, 2] = (1 - s) * uniform(-1, 1)
        return _affine_views(x, theta)
    if name == "affine":
        angle = uniform(-10, 10) * math.pi / 180
        scale = uniform(0.9, 1.1)
        theta[:, 0, 0] = torch.cos(angle) / scale
        theta[:, 0, 1] = -torch.sin(angle) / scale
        theta[:, 1, 0] = torch.sin(angle) / scale
        theta[:, 1, 1] = torch.cos(angle) / scale
        theta[:, 0, 2] = uniform(-0.1, 0.1)
        theta[:, 1, 2] = uniform(-0.1, 0.1)
        return _affine_views(x, theta)
    raise ValueError(f"unknown augmentation {name!r}; choose from {AUGMENTATIONS}")


def episode_generator(cfg: AdaptationConfig, core_id: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(cfg.seed * 1_000_003 + zlib.crc32(str(core_id).encode()))
    return g


def adapt_core_memo(model: EnsembleModel, core: CoreBatch, augmentations: Sequence[str],
                    cfg: AdaptationConfig, restore_after: bool = True) -> AdaptedPrediction:
    """Minimise the entropy of predictions averaged over augmented views.

    The views are drawn once per episode, so every step and the trace see the
    same objective.
    """
    if len(augmentations) == 0:
        raise ValueError("MEMO needs at least one augmentation")
    unknown = [a for a in augmentations if a not in AUGMENTATIONS]
    if unknown:
        raise ValueError(f"unknown augmentation(s) {unknown}; choose from {AUGMENTATIONS}")
    x = core.patches
    g = episode_generator(cfg, core.core_id)
    views = [augment(x, name, g) for name in augmentations]

    def objective():
        return obj.memo_marginal_entropy([forward_marginal(model, v) for v in views]), None

    return run_episode(model, objective, _marginal_predictor(model, x), cfg, restore_after)
