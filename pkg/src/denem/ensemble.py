"""Deep ensemble of ResNet10-style patch classifiers.

Each member is an independent encoder + linear head initialised from its own
seed. Members are built with batch norm and, under a group-norm policy, have
every batch-norm layer swapped for group norm, which normalises within each
sample and therefore has no running statistics: train and eval mode give the
same outputs for a group-norm model.
"""
import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from denem.objectives import marginal_probability

NORM_KINDS = ("batch", "group")


@dataclass(frozen=True)
class NormPolicy:
    kind: str = "group"
    num_groups: int = 8

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ValueError(f"norm kind must be one of {NORM_KINDS}, got {self.kind!r}")
        if self.kind == "group" and self.num_groups < 1:
            raise ValueError(f"num_groups must be positive, got {self.num_groups}")

    def check_channels(self, channels: Sequence[int]) -> None:
        if self.kind != "group":
            return
        bad = sorted({c for c in channels if c % self.num_groups})
        if bad:
            raise ValueError(f"num_groups={self.num_groups} does not divide channel counts {bad}")


@dataclass(frozen=True)
class EncoderArch:
    """Four residual stages of one basic block each, single-channel input."""

    widths: Tuple[int, ...] = (64, 128, 256, 512)
    input_size: int = 256
    in_channels: int = 1

    @classmethod
    def desk(cls) -> "EncoderArch":
        return cls(widths=(8, 16, 32, 64), input_size=64)

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "input_size": self.input_size, "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderArch":
        return cls(widths=tuple(d["widths"]), input_size=int(d["input_size"]), in_channels=int(d.get("in_channels", 1)))


@dataclass(frozen=True)
class MemberSpec:
    arch: EncoderArch
    init_seed: int


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class ResNet10(nn.Module):
    def __init__(self, arch: EncoderArch, num_classes: int = 2):
        super().__init__()
        w = arch.widths
        self.arch = arch
        self.stem = nn.Sequential(
            nn.Conv2d(arch.in_channels, w[0], 7, 2, 3, bias=False),
            nn.BatchNorm2d(w[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        blocks, cin = [], w[0]
        for i, cout in enumerate(w):
            blocks.append(BasicBlock(cin, cout, 1 if i == 0 else 2))
            cin = cout
        self.layers = nn.Sequential(*blocks)
        self.fc = nn.Linear(cin, num_classes)

    def features(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.layers(self.stem(x)), 1), 1)

    def forward(self, x):
        return self.fc(self.features(x))


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")


def build_member(spec: MemberSpec, norm: NormPolicy, num_classes: int = 2) -> ResNet10:
    norm.check_channels(spec.arch.widths)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.init_seed)
        member = ResNet10(spec.arch, num_classes)
        _init_weights(member)
    if norm.kind == "group":
        substitute_norm_layers(member, norm)
    return member


class EnsembleModel(nn.Module):
    """``M`` structurally identical members plus their construction record."""

    def __init__(self, members: Sequence[ResNet10], arch: EncoderArch, norm_policy: NormPolicy,
                 num_classes: int, seeds: Sequence[int]):
        super().__init__()
        self.members = nn.ModuleList(members)
        self.arch = arch
        self.norm_policy = norm_policy
        self.num_classes = num_classes
        self.seeds = list(seeds)
        self.metadata: Dict[str, object] = {}

    @property
    def num_members(self) -> int:
        return len(self.members)

    def descriptor(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "norm": asdict(self.norm_policy),
            "num_classes": self.num_classes,
            "num_members": self.num_members,
        }

    def forward(self, x):
        """Stacked member logits, shape ``(M, B, C)``."""
        x = _check_input(self, x)
        return torch.stack([m(x) for m in self.members])

    def member_probs(self, x) -> List[torch.Tensor]:
        x = _check_input(self, x)
        return [torch.softmax(m(x), -1) for m in self.members]


def build_ensemble(specs: Sequence[MemberSpec], norm: NormPolicy = NormPolicy(), num_classes: int = 2) -> EnsembleModel:
    if len(specs) < 1:
        raise ValueError("an ensemble needs at least one member")
    seeds = [s.init_seed for s in specs]
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"member seeds must be distinct, got {seeds}")
    archs = {s.arch for s in specs}
    if len(archs) != 1:
        raise ValueError("all members must share one encoder architecture")
    members = [build_member(s, norm, num_classes) for s in specs]
    model = EnsembleModel(members, specs[0].arch, norm, num_classes, seeds)
    if norm.kind == "group":
        model.metadata["norm_substitution"] = members[0].norm_metadata
    return model


def make_ensemble(num_members: int, arch: EncoderArch = EncoderArch(), norm: NormPolicy = NormPolicy(),
                  num_classes: int = 2, base_seed: int = 0) -> EnsembleModel:
    """Convenience wrapper with consecutive seeds ``base_seed .. base_seed + M - 1``."""
    return build_ensemble([MemberSpec(arch, base_seed + i) for i in range(num_members)], norm, num_classes)


_OTHER_NORMS = (nn.BatchNorm1d, nn.BatchNorm3d, nn.SyncBatchNorm, nn.InstanceNorm1d, nn.InstanceNorm2d,
                nn.InstanceNorm3d, nn.LayerNorm, nn.LocalResponseNorm)


def substitute_norm_layers(model: nn.Module, policy: NormPolicy) -> nn.Module:
    """Swap every ``BatchNorm2d`` for a ``GroupNorm`` over the same channels.

    Affine parameters are carried over, so the parameter count is unchanged;
    the running-statistic buffers disappear. A summary is stored on
    ``model.norm_metadata``.
    """
    unknown = [name for name, m in model.named_modules() if isinstance(m, _OTHER_NORMS)]
    if unknown:
        raise ValueError(f"unsupported normalization layers: {unknown}")
    bn = [(name, m) for name, m in model.named_modules() if isinstance(m, nn.BatchNorm2d)]
    gn = [(name, m) for name, m in model.named_modules() if isinstance(m, nn.GroupNorm)]
    if policy.kind == "batch":
        if gn:
            raise ValueError(f"cannot restore batch norm in place of group norm layers: {[n for n, _ in gn]}")
        return model
    policy.check_channels([m.num_features for _, m in bn] + [m.num_channels for _, m in gn])

    params_before = sum(p.numel() for p in model.parameters())
    buffers_before = sum(b.numel() for b in model.buffers())
    for name, old in bn:
        new = nn.GroupNorm(policy.num_groups, old.num_features, eps=old.eps, affine=old.affine)
        if old.affine:
            with torch.no_grad():
                new.weight.copy_(old.weight)
                new.bias.copy_(old.bias)
        parent_name, _, child = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, child, new)
    info = {
        "replaced_layers": len(bn),
        "param_count_before": params_before,
        "param_count_after": sum(p.numel() for p in model.parameters()),
        "buffer_count_before": buffers_before,
        "buffer_count_after": sum(b.numel() for b in model.buffers()),
    }
    prior = getattr(model, "norm_metadata", None)
    if not bn and prior:
        info = prior
    model.norm_metadata = info
    if isinstance(model, EnsembleModel):
        model.norm_policy = policy
        model.metadata["norm_substitution"] = info
    return model


def count_layers(model: nn.Module, kind) -> int:
    return sum(isinstance(m, kind) for m in model.modules())


def _check_input(model: EnsembleModel, x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 3:
        x = x.unsqueeze(1)
    a = model.arch
    expected = (a.in_channels, a.input_size, a.input_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ValueError(f"expected input of shape (B, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
    return x


def forward_member(model: EnsembleModel, m: int, batch: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """``(probabilities, logits)`` of member ``m``."""
    if not 0 <= m < model.num_members:
        raise IndexError(f"member index {m} out of range for {model.num_members} members")
    logits = model.members[m](_check_input(model, batch))
    return torch.softmax(logits, -1), logits


def forward_marginal(model: EnsembleModel, batch: torch.Tensor) -> torch.Tensor:
    return marginal_probability(model.member_probs(batch))


@dataclass
class ParameterSnapshot:
    descriptor: dict
    states: List[Dict[str, torch.Tensor]] = field(repr=False)


def snapshot(model: EnsembleModel) -> ParameterSnapshot:
    states = [{k: v.detach().clone() for k, v in m.state_dict().items()} for m in model.members]
    return ParameterSnapshot(model.descriptor(), states)


@torch.no_grad()
def restore(model: EnsembleModel, snap: ParameterSnapshot) -> EnsembleModel:
    if snap.descriptor != model.descriptor():
        raise ValueError(f"snapshot architecture {snap.descriptor} does not match model {model.descriptor()}")
    for i, (member, state) in enumerate(zip(model.members, snap.states)):
        current = member.state_dict()
        if current.keys() != state.keys() or any(current[k].shape != state[k].shape for k in state):
            raise ValueError(f"snapshot tensors for member {i} do not match the model")
        for k, v in current.items():
            v.copy_(state[k])
    return model


def clone(model: EnsembleModel) -> EnsembleModel:
    return copy.deepcopy(model)


MANIFEST = "manifest.json"


def save_checkpoint(model: EnsembleModel, directory, config_hash: Optional[str] = None,
                    extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, member in enumerate(model.members):
        name = f"member_{i}.pt"
        torch.save(member.state_dict(), directory / name)
        files.append(name)
    manifest = dict(model.descriptor(), seeds=model.seeds, member_files=files, config_hash=config_hash,
                    metadata=model.metadata)
    if extra:
        manifest["extra"] = extra
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory) -> EnsembleModel:
    directory = Path(directory)
    manifest = read_manifest(directory)
    arch = EncoderArch.from_dict(manifest["arch"])
    norm = NormPolicy(**manifest["norm"])
    model = build_ensemble([MemberSpec(arch, s) for s in manifest["seeds"]], norm, manifest["num_classes"])
    for member, name in zip(model.members, manifest["member_files"]):
        member.load_state_dict(torch.load(directory / name, weights_only=True))
    model.metadata = manifest.get("metadata", {})
    return model
