"""Dataset on disk: ``manifest.csv`` plus one ``.npz`` array container per core."""
import csv
from pathlib import Path
from typing import List, Sequence

import numpy as np

from denem.data.synthetic import BiopsyCore

MANIFEST_NAME = "manifest.csv"
COLUMNS = ["core_id", "patient_id", "center_id", "label", "involvement", "gleason", "patch_path"]


class DatasetError(ValueError):
    pass


def save_dataset(cores: Sequence[BiopsyCore], path) -> Path:
    root = Path(path)
    (root / "cores").mkdir(parents=True, exist_ok=True)
    rows = []
    for c in cores:
        rel = f"cores/{c.core_id}.npz"
        np.savez(root / rel, patches=np.asarray(c.patches, dtype=np.float32))
        rows.append([c.core_id, c.patient_id, c.center_id, c.label, repr(float(c.involvement)),
                     "" if c.gleason is None else c.gleason, rel])
    with open(root / MANIFEST_NAME, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        writer.writerows(rows)
    return root


def read_manifest(path) -> List[dict]:
    manifest = Path(path) / MANIFEST_NAME
    if not manifest.exists():
        raise DatasetError(f"no {MANIFEST_NAME} in {path}")
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != COLUMNS:
            raise DatasetError(f"{manifest}: expected columns {COLUMNS}, found {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(COLUMNS):
                raise DatasetError(f"{manifest}:{lineno}: expected {len(COLUMNS)} fields, found {len(row)}")
            rows.append(dict(zip(COLUMNS, row)))
    return rows


def load_dataset(path) -> List[BiopsyCore]:
    root = Path(path)
    cores = []
    for row in read_manifest(root):
        cid = row["core_id"]
        try:
            label = int(row["label"])
            involvement = float(row["involvement"])
            gleason = int(row["gleason"]) if row["gleason"] else None
        except ValueError as exc:
            raise DatasetError(f"core {cid}: malformed manifest field ({exc})") from None
        file = root / row["patch_path"]
        if not file.exists():
            raise DatasetError(f"core {cid}: patch file {row['patch_path']} is missing")
        with np.load(file) as data:
            if "patches" not in data:
                raise DatasetError(f"core {cid}: {row['patch_path']} has no 'patches' array")
            patches = data["patches"]
        try:
            cores.append(BiopsyCore(cid, row["patient_id"], row["center_id"], patches, label, involvement, gleason))
        except ValueError as exc:
            raise DatasetError(str(exc)) from None
    return cores
