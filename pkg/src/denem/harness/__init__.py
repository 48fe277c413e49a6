from denem.harness.config import ExperimentConfig, desk_scale, load_config
from denem.harness.pipeline import RunRecord, cmd_ablate, cmd_eval, cmd_heatmap, cmd_synth, cmd_train

__all__ = ["ExperimentConfig", "RunRecord", "cmd_ablate", "cmd_eval", "cmd_heatmap", "cmd_synth", "cmd_train",
           "desk_scale", "load_config"]
