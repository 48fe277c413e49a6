"""Supervised training of the single / ensemble / ensemble+MI variants for one fold."""
import copy
import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from denem import objectives as obj
from denem.data.synthetic import BiopsyCore
from denem.ensemble import EnsembleModel, MemberSpec, build_ensemble
from denem.evaluation import CorePrediction, auroc
from denem.harness.config import ExperimentConfig


def job_seed(seed: int, *keys) -> int:
    """Stable 32-bit seed for one job, independent of scheduling order."""
    words = [seed] + [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def member_seeds(seed: int, test_center: str, num_members: int) -> List[int]:
    # shared by every variant of a fold so the comparisons are paired
    state = np.random.SeedSequence([seed, zlib.crc32(test_center.encode())]).generate_state(num_members)
    return [int(s) for s in state]


def stack_patches(cores: Sequence[BiopsyCore]):
    x = torch.from_numpy(np.concatenate([c.patches for c in cores]))[:, None]
    y = torch.cat([torch.full((len(c.patches),), c.label, dtype=torch.long) for c in cores])
    return x, y


def warmup_cosine(total_steps: int, warmup_fraction: float = 0.05):
    """Linear warm-up over the first steps, then cosine annealing to zero."""
    warmup = max(1, int(round(warmup_fraction * total_steps)))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))

    return factor


@torch.no_grad()
def member_core_scores(model: EnsembleModel, cores: Sequence[BiopsyCore]) -> np.ndarray:
    """``(M, n_cores)`` mean cancer probability per member and core, in eval mode."""
    was = model.training
    model.eval()
    x, _ = stack_patches(cores)
    probs = torch.cat([torch.stack(model.member_probs(chunk))[..., 1] for chunk in x.split(256)], 1)
    model.train(was)
    bounds = np.cumsum([0] + [len(c.patches) for c in cores])
    p = probs.double().numpy()
    return np.stack([p[:, a:b].mean(1) for a, b in zip(bounds[:-1], bounds[1:])], 1)


def score_auroc(scores: Sequence[float], cores: Sequence[BiopsyCore]) -> float:
    labels = [c.label for c in cores]
    if len(set(labels)) < 2:
        return float("nan")
    return auroc([CorePrediction(c.core_id, float(s), c.label) for s, c in zip(scores, cores)])


@dataclass
class TrainResult:
    model: EnsembleModel
    best_epoch: int
    val_auroc: float
    history: List[dict] = field(default_factory=list)
    # member index -> (best epoch, val AUROC, state) when per-member selection was requested
    member_best: Dict[int, tuple] = field(default_factory=dict)


def train_fold(train: Sequence[BiopsyCore], val: Sequence[BiopsyCore], cfg: ExperimentConfig,
               seeds: Sequence[int], lam: float, norm=None, track_member: Optional[int] = None) -> TrainResult:
    """Minimise summed CE + ``lam`` x MI with Adam and keep the best validation epoch.

    With ``track_member`` set, that member is additionally selected on its own
    validation AUROC. Members share nothing under the summed cross-entropy
    when ``lam == 0``, so this equals training it as a standalone network.
    """
    norm = norm or cfg.norm
    # channels-last is markedly faster for these small convolutions on CPU
    model = build_ensemble([MemberSpec(cfg.arch, s) for s in seeds], norm).to(memory_format=torch.channels_last)
    x, y = stack_patches(train)
    x = x.contiguous(memory_format=torch.channels_last)
    # the multi-tensor update is bitwise identical to the per-tensor loop and cheaper for many small tensors
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, foreach=True)
    steps_per_epoch = math.ceil(len(x) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(cfg.epochs * steps_per_epoch, cfg.warmup_fraction))
    gen = torch.Generator().manual_seed(job_seed(seeds[0], "order"))

    best = (-math.inf, -1, None)
    member_best = (-math.inf, -1, None)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(x), generator=gen)
        total, batches = 0.0, 0
        for idx in order.split(cfg.batch_size):
            loss = obj.training_loss(model.member_probs(x[idx]), y[idx], lam)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item()
            batches += 1
        scores = member_core_scores(model, val)
        val_auc = score_auroc(scores.mean(0), val)
        history.append({"epoch": epoch, "loss": total / batches, "val_auroc": val_auc})
        key = -math.inf if math.isnan(val_auc) else val_auc
        if key > best[0] or best[2] is None:
            best = (key, epoch, copy.deepcopy(model.state_dict()))
        if track_member is not None:
            m_auc = score_auroc(scores[track_member], val)
            m_key = -math.inf if math.isnan(m_auc) else m_auc
            if m_key > member_best[0] or member_best[2] is None:
                member_best = (m_key, epoch, copy.deepcopy(model.members[track_member].state_dict()))

    extra = {}
    if track_member is not None:
        extra[track_member] = (member_best[1], member_best[0], member_best[2])
    model.load_state_dict(best[2])
    model.to(memory_format=torch.contiguous_format).eval()
    model.metadata.update({"best_epoch": best[1], "val_auroc": best[0], "lambda": lam})
    return TrainResult(model, best[1], best[0], history, extra)


def extract_member(result: TrainResult, index: int) -> EnsembleModel:
    """The tracked member as a standalone single-network model at its own best epoch."""
    source = result.model
    epoch, val_auc, state = result.member_best[index]
    single = build_ensemble([MemberSpec(source.arch, source.seeds[index])], source.norm_policy, source.num_classes)
    single.members[0].load_state_dict(state)
    single.to(memory_format=torch.contiguous_format)
    single.eval()
    single.metadata.update({"best_epoch": epoch, "val_auroc": val_auc, "lambda": 0.0})
    return single


def train_variants(train: Sequence[BiopsyCore], val: Sequence[BiopsyCore], cfg: ExperimentConfig,
                   test_center: str, variants: Sequence[str]) -> Dict[str, TrainResult]:
    """Train the requested variants of one fold with paired member seeds."""
    seeds = member_seeds(cfg.seed, test_center, cfg.num_members)
    out: Dict[str, TrainResult] = {}
    if "single" in variants or "ensemble" in variants:
        if "ensemble" in variants:
            res = train_fold(train, val, cfg, seeds, 0.0, track_member=0 if "single" in variants else None)
            out["ensemble"] = res
            if "single" in variants:
                epoch, val_auc, _ = res.member_best[0]
                out["single"] = TrainResult(extract_member(res, 0), epoch, val_auc)
        else:
            out["single"] = train_fold(train, val, cfg, seeds[:1], 0.0)
    if "ensemble_mi" in variants:
        out["ensemble_mi"] = train_fold(train, val, cfg, seeds, cfg.lam)
    return out
