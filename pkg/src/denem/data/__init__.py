from denem.data.geometry import PatchSpec, RFFrame, extract_patches, window_grid
from denem.data.io import DatasetError, load_dataset, save_dataset
from denem.data.splits import Fold, SplitPlan, loco_split
from denem.data.synthetic import (
    DEFAULT_CENTERS,
    BiopsyCore,
    CenterShiftParams,
    SynthConfig,
    synthesize_center,
)

__all__ = [
    "BiopsyCore", "CenterShiftParams", "DEFAULT_CENTERS", "DatasetError", "Fold", "PatchSpec", "RFFrame",
    "SplitPlan", "SynthConfig", "extract_patches", "load_dataset", "loco_split", "save_dataset",
    "synthesize_center", "window_grid",
]
