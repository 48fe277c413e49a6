"""Leave-one-center-out fold plans with patient-wise train/validation splits."""
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from denem.data.synthetic import BiopsyCore


@dataclass
class Fold:
    test_center: str
    train_patients: List[str]
    val_patients: List[str]

    def select(self, cores: Sequence[BiopsyCore]):
        """``(train, val, test)`` core lists for this fold."""
        train, val = set(self.train_patients), set(self.val_patients)
        return (
            [c for c in cores if c.patient_id in train],
            [c for c in cores if c.patient_id in val],
            [c for c in cores if c.center_id == self.test_center],
        )


@dataclass
class SplitPlan:
    folds: List[Fold]

    def check(self, cores: Sequence[BiopsyCore]) -> None:
        center_of = {c.patient_id: c.center_id for c in cores}
        centers = sorted({c.center_id for c in cores})
        if sorted(f.test_center for f in self.folds) != centers:
            raise AssertionError("every center must be held out exactly once")
        for f in self.folds:
            train, val = set(f.train_patients), set(f.val_patients)
            test = {p for p, c in center_of.items() if c == f.test_center}
            if train & val or test & (train | val):
                raise AssertionError(f"fold {f.test_center}: patient sets overlap")


def loco_split(cores: Sequence[BiopsyCore], val_fraction: float = 0.2, seed: int = 0) -> SplitPlan:
    """One fold per center; the rest are split into train/val per center, then pooled.

    Within each training center patients are stratified by whether any of
    their cores is cancerous, so both splits see both classes when possible.
    """
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    patients: Dict[str, Dict[str, bool]] = defaultdict(dict)
    for c in cores:
        patients[c.center_id][c.patient_id] = patients[c.center_id].get(c.patient_id, False) or c.label == 1
    centers = sorted(patients)
    if len(centers) < 2:
        raise ValueError(f"leave-one-center-out needs at least 2 centers, got {len(centers)}")
    for center in centers:
        if not patients[center]:
            raise ValueError(f"center {center} has no patients")

    rng = np.random.default_rng(seed)
    val_of: Dict[str, set] = {}
    for center in centers:
        chosen = set()
        for positive in (False, True):
            group = sorted(p for p, pos in patients[center].items() if pos == positive)
            rng.shuffle(group)
            chosen.update(group[:int(round(val_fraction * len(group)))])
        val_of[center] = chosen

    folds = []
    for test in centers:
        train, val = [], []
        for center in centers:
            if center == test:
                continue
            for p in sorted(patients[center]):
                (val if p in val_of[center] else train).append(p)
        folds.append(Fold(test, train, val))
    return SplitPlan(folds)
