"""Experiment pipeline: synthesis, per-fold training, evaluation, ablation and heatmaps.

Every fold is an independent job whose randomness comes only from
``(cfg.seed, test_center)``, so running folds in parallel or in a
different order leaves every number unchanged.
"""
import hashlib
import json
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from denem import adaptation as ad
from denem.data import load_dataset, loco_split, save_dataset, synthesize_center
from denem.data.synthetic import find_draw, render_frame
from denem.ensemble import EnsembleModel, NormPolicy, load_checkpoint, read_manifest, save_checkpoint
from denem.evaluation import (
    CorePrediction,
    FoldReport,
    composite,
    evaluate_fold,
    export_heatmap,
    select_threshold,
    summarize,
    write_aggregate_csv,
    write_fold_reports,
)
from denem.harness.config import ABLATION_ROWS, METHODS, VARIANTS, ExperimentConfig, from_dict
from denem.harness.training import score_auroc, train_variants


class PipelineError(RuntimeError):
    pass


# -- run records -----------------------------------------------------------

def source_revision() -> str:
    root = Path(__file__).resolve().parents[1]
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    rev = "src-" + digest.hexdigest()[:12]
    try:
        head = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=root, capture_output=True, text=True,
                              timeout=5)
        if head.returncode == 0 and head.stdout.strip():
            rev = f"git-{head.stdout.strip()}+{rev}"
    except (OSError, subprocess.SubprocessError):
        pass
    return rev


@dataclass
class RunRecord:
    command: str
    config: dict
    config_hash: str
    source_revision: str
    seeds: List[int]
    fold_reports: Dict[str, List[dict]] = field(default_factory=dict)
    flags: Dict[str, dict] = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def experiment_config(self) -> ExperimentConfig:
        return from_dict(self.config)

    def reports(self, method: str) -> List[FoldReport]:
        return [FoldReport(**r) for r in self.fold_reports[method]]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def _record(command: str, cfg: ExperimentConfig) -> RunRecord:
    return RunRecord(command, cfg.to_dict(), cfg.config_hash(), source_revision(), [cfg.seed])


# -- data --------------------------------------------------------------------

def synthesize(cfg: ExperimentConfig):
    cores = []
    for params in cfg.data.centers:
        cores += synthesize_center(params, cfg.data.n_patients, cfg.data.cores_per_patient, cfg.data.cancer_rate,
                                   cfg.seed, cfg.data.synth)
    return cores


def cmd_synth(cfg: ExperimentConfig, out=None) -> Path:
    """Write the synthetic multi-center dataset to ``out`` (default ``cfg.dataset``)."""
    root = Path(out or cfg.dataset)
    save_dataset(synthesize(cfg), root)
    (root / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return root


def load_cores(cfg: ExperimentConfig):
    root = Path(cfg.dataset)
    if not (root / "manifest.csv").exists():
        raise PipelineError(f"dataset not found at {root} (run 'synth' first)")
    return load_dataset(root)


def fold_plan(cores, cfg: ExperimentConfig):
    return loco_split(cores, cfg.data.val_fraction, cfg.seed)


def _run_jobs(fn, jobs: Sequence, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=torch.set_num_threads, initargs=(1,)) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# -- training ----------------------------------------------------------------

def checkpoint_dir(cfg: ExperimentConfig, variant: str, test_center: str, norm: Optional[NormPolicy] = None) -> Path:
    tag = variant if (norm or cfg.norm).kind == "group" else f"{variant}-{(norm or cfg.norm).kind}"
    return Path(cfg.out_dir) / "checkpoints" / tag / test_center


def _train_job(cfg_dict: dict, test_center: str, variants: tuple, norm_kind: Optional[str] = None):
    cfg = from_dict(cfg_dict)
    if norm_kind is not None:
        cfg = replace(cfg, norm=NormPolicy(kind=norm_kind, num_groups=cfg.norm.num_groups))
    cores = load_cores(cfg)
    fold = next(f for f in fold_plan(cores, cfg).folds if f.test_center == test_center)
    train, val, _ = fold.select(cores)
    results = train_variants(train, val, cfg, test_center, variants)
    summary = {}
    for variant, res in results.items():
        save_checkpoint(res.model, checkpoint_dir(cfg, variant, test_center, cfg.norm), cfg.config_hash(),
                        {"variant": variant, "test_center": test_center, "history": res.history,
                         "best_epoch": res.best_epoch})
        summary[variant] = {"best_epoch": res.best_epoch, "val_auroc": res.val_auroc, "history": res.history}
    return test_center, summary


def cmd_train(cfg: ExperimentConfig, variants: Optional[Sequence[str]] = None, norm_kind: Optional[str] = None) -> RunRecord:
    """Train the checkpoint variants for every LOCO fold."""
    start = time.perf_counter()
    variants = tuple(variants or (cfg.variant,))
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise PipelineError(f"unknown variants {sorted(unknown)}")
    cores = load_cores(cfg)
    centers = [f.test_center for f in fold_plan(cores, cfg).folds]
    results = _run_jobs(_train_job, [(cfg.to_dict(), c, variants, norm_kind) for c in centers], cfg.workers)
    rec = _record("train", cfg)
    rec.flags = {"training": dict(results)}
    rec.wall_clock_s = time.perf_counter() - start
    suffix = "" if norm_kind in (None, "group") else f"-{norm_kind}"
    rec.save(Path(cfg.out_dir) / f"train_record{suffix}.json")
    return rec


# -- evaluation --------------------------------------------------------------

def load_variant(cfg: ExperimentConfig, method: str, test_center: str, norm: Optional[NormPolicy] = None) -> EnsembleModel:
    variant, engine = METHODS[method]
    directory = checkpoint_dir(cfg, variant, test_center, norm)
    try:
        manifest = read_manifest(directory)
    except FileNotFoundError:
        raise PipelineError(f"no '{variant}' checkpoint for fold {test_center} at {directory} (run 'train' first)") from None
    found = manifest.get("extra", {}).get("variant")
    if found != variant:
        raise PipelineError(f"method {method!r} needs a '{variant}' checkpoint, found '{found}' at {directory}")
    if engine == "denem" or engine == "marginal_entropy":
        if manifest["num_members"] < 2:
            raise PipelineError(f"method {method!r} needs an ensemble checkpoint with >= 2 members")
    model = load_checkpoint(directory)
    model.eval()
    return model


def adapt_fn(method: str, cfg: ExperimentConfig):
    """``(model, core, adaptation cfg, restore_after=True) -> AdaptedPrediction`` for the method, or None."""
    engine = METHODS[method][1]
    if engine is None:
        return None
    if engine == "denem":
        return ad.adapt_core_denem
    if engine == "marginal_entropy":
        return lambda model, core, a, restore_after=True: ad.adapt_core_denem(
            model, core, replace(a, lambda_adapt=0.0), restore_after)
    if engine == "tent":
        return lambda model, core, a, restore_after=True: ad.adapt_core_tent(
            model, core, replace(a, param_scope=cfg.tent_param_scope), restore_after)
    if engine == "memo":
        return lambda model, core, a, restore_after=True: ad.adapt_core_memo(
            model, core, cfg.memo_augmentations, a, restore_after)
    raise PipelineError(f"unknown adaptation engine {engine!r}")


def score_cores(model: EnsembleModel, cores, method: str, cfg: ExperimentConfig, acfg: ad.AdaptationConfig):
    """Core scores plus one adaptation-trace record per core."""
    fn = adapt_fn(method, cfg)
    scores, traces = [], []
    for c in cores:
        batch = ad.CoreBatch(torch.from_numpy(c.patches), c.core_id)
        if fn is None:
            scores.append(ad.predict_core(model, batch))
            continue
        res = fn(model, batch, acfg)
        scores.append(res.core_score)
        traces.append({"core_id": c.core_id, "objective_trace": res.objective_trace, "aborted": res.aborted,
                       "lr_adapt": acfg.lr_adapt, "steps": acfg.steps})
    return scores, traces


def select_adaptation(model: EnsembleModel, val, method: str, cfg: ExperimentConfig) -> ad.AdaptationConfig:
    """Grid point with the highest validation AUROC; earlier grid points win ties."""
    if METHODS[method][1] is None or not cfg.adapt_sweep:
        return cfg.adaptation
    best, best_auc = cfg.adaptation, -np.inf
    for lr in cfg.lr_grid:
        for steps in cfg.steps_grid:
            acfg = replace(cfg.adaptation, lr_adapt=lr, steps=steps)
            auc = score_auroc(score_cores(model, val, method, cfg, acfg)[0], val)
            if auc > best_auc:
                best, best_auc = acfg, auc
    return best


def _predictions(scores, cores):
    return [CorePrediction(c.core_id, float(np.clip(s, 0, 1)), c.label, c.involvement, c.center_id)
            for s, c in zip(scores, cores)]


def evaluate_method_fold(cfg: ExperimentConfig, method: str, test_center: str, cores=None,
                         norm: Optional[NormPolicy] = None):
    """FoldReport, chosen adaptation config and traces for one method on one fold."""
    cores = cores if cores is not None else load_cores(cfg)
    fold = next(f for f in fold_plan(cores, cfg).folds if f.test_center == test_center)
    _, val, test = fold.select(cores)
    model = load_variant(cfg, method, test_center, norm)
    acfg = select_adaptation(model, val, method, cfg)
    threshold = 0.5
    if cfg.val_threshold and len({c.label for c in val}) == 2:
        threshold = select_threshold(_predictions(score_cores(model, val, method, cfg, acfg)[0], val))
    scores, traces = score_cores(model, test, method, cfg, acfg)
    report = evaluate_fold(_predictions(scores, test), decision_threshold=threshold)
    return report, acfg, traces


def _eval_job(cfg_dict: dict, method: str, test_center: str, norm_kind: Optional[str] = None):
    cfg = from_dict(cfg_dict)
    norm = NormPolicy(kind=norm_kind, num_groups=cfg.norm.num_groups) if norm_kind else None
    report, acfg, traces = evaluate_method_fold(cfg, method, test_center, norm=norm)
    return method, report, acfg.to_dict(), traces


def evaluate_methods(cfg: ExperimentConfig, methods: Sequence[str], norm_kind: Optional[str] = None):
    """``{method: [FoldReport]}`` plus adaptation settings and traces, per fold."""
    cores = load_cores(cfg)
    centers = [f.test_center for f in fold_plan(cores, cfg).folds]
    jobs = [(cfg.to_dict(), m, c, norm_kind) for m in methods for c in centers]
    reports: Dict[str, List[FoldReport]] = {m: [] for m in methods}
    chosen: Dict[str, dict] = {m: {} for m in methods}
    traces: Dict[str, dict] = {m: {} for m in methods}
    for (method, report, acfg, trace), job in zip(_run_jobs(_eval_job, jobs, cfg.workers), jobs):
        reports[method].append(report)
        chosen[method][job[2]] = acfg
        traces[method][job[2]] = trace
    return reports, chosen, traces


def _write_eval_outputs(cfg: ExperimentConfig, reports, traces, name: str) -> Path:
    root = Path(cfg.out_dir) / name
    root.mkdir(parents=True, exist_ok=True)
    for method, rs in reports.items():
        write_fold_reports(rs, root / f"{method}_folds.jsonl")
        for center, trace in traces[method].items():
            if trace:
                (root / f"{method}_{center}_traces.jsonl").write_text(
                    "".join(json.dumps(t, sort_keys=True) + "\n" for t in trace))
    return write_aggregate_csv(reports, root / "aggregate.csv")


def cmd_eval(cfg: ExperimentConfig, methods: Optional[Sequence[str]] = None) -> RunRecord:
    """Evaluate ``cfg.method`` (or ``methods``) on every fold and write the aggregate CSV."""
    start = time.perf_counter()
    methods = list(methods or [cfg.method])
    reports, chosen, traces = evaluate_methods(cfg, methods)
    _write_eval_outputs(cfg, reports, traces, "eval")
    rec = _record("eval", cfg)
    rec.fold_reports = {m: [asdict(r) for r in rs] for m, rs in reports.items()}
    rec.flags = {"adaptation": chosen}
    rec.wall_clock_s = time.perf_counter() - start
    rec.save(Path(cfg.out_dir) / "eval" / "run_record.json")
    return rec


# -- ablation -----------------------------------------------------------------

ABLATION_COLUMNS = ["row", "method", "group_norm", "ensemble", "mutual_info", "test_adapt",
                    "auroc", "auroc_std", "auroc_all", "auroc_all_std", "balanced_acc", "balanced_acc_std",
                    "ece", "ece_std"]


def write_ablation_table(rows: List[dict], path) -> Path:
    import csv
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ABLATION_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def cmd_ablate(cfg: ExperimentConfig, train: bool = True) -> RunRecord:
    """Train all variants once, then evaluate the five ablation rows in table order.

    With ``cfg.compare_norms`` a batch-norm single network is trained as well
    and compared per test center against its group-norm counterpart.
    """
    start = time.perf_counter()
    if train:
        cmd_train(cfg, VARIANTS)
    methods = [m for m, _ in ABLATION_ROWS]
    reports, chosen, traces = evaluate_methods(cfg, methods)
    root = Path(cfg.out_dir) / "ablation"
    _write_eval_outputs(cfg, reports, traces, "ablation")
    rows = []
    for i, (method, flags) in enumerate(ABLATION_ROWS, start=1):
        rows.append(dict(row=i, method=method, **{k: int(v) for k, v in flags.items()}, **summarize(reports[method])))
    write_ablation_table(rows, root / "table.csv")
    rec = _record("ablate", cfg)
    rec.fold_reports = {m: [asdict(r) for r in rs] for m, rs in reports.items()}
    rec.flags = {"rows": dict(ABLATION_ROWS), "adaptation": chosen}
    if cfg.compare_norms:
        if train:
            cmd_train(cfg, ("single",), norm_kind="batch")
        bn, _, _ = evaluate_methods(cfg, ["resnet10"], norm_kind="batch")
        comparison = {"batch": bn["resnet10"], "group": reports["resnet10"]}
        write_aggregate_csv(comparison, root / "norm_comparison.csv")
        rec.fold_reports["resnet10_batchnorm"] = [asdict(r) for r in bn["resnet10"]]
    rec.wall_clock_s = time.perf_counter() - start
    rec.save(root / "run_record.json")
    return rec


# -- heatmaps -----------------------------------------------------------------

HEATMAP_METHODS = ("resnet10", "denem")


def cmd_heatmap(cfg: ExperimentConfig, core_ids: Sequence[str], methods: Sequence[str] = HEATMAP_METHODS) -> List[Path]:
    """Sliding-window heatmaps of each selected frame for each method, plus a side-by-side composite."""
    cores = {c.core_id: c for c in load_cores(cfg)}
    params = {p.center_id: p for p in cfg.data.centers}
    root = Path(cfg.out_dir) / "heatmaps"
    written = []
    for core_id in core_ids:
        if core_id not in cores:
            raise PipelineError(f"unknown frame {core_id!r}: no such core in {cfg.dataset}")
        core = cores[core_id]
        draw = find_draw(core_id, params[core.center_id], cfg.data.n_patients, cfg.data.cores_per_patient,
                         cfg.data.cancer_rate, cfg.seed, cfg.data.synth)
        frame, _ = render_frame(draw, params[core.center_id], cfg.data.synth)
        paths = []
        for method in methods:
            model = load_variant(cfg, method, core.center_id)
            path = root / f"{core_id}_{method}.png"
            if METHODS[method][1] is None:
                export_heatmap(model, frame, cfg.data.synth.patch, path)
            else:
                # adapt on the core's own patches, then slide the adapted model over the frame
                with ad.episode(model):
                    batch = ad.CoreBatch(torch.from_numpy(core.patches), core_id)
                    adapt_fn(method, cfg)(model, batch, cfg.adaptation, restore_after=False)
                    model.eval()
                    export_heatmap(model, frame, cfg.data.synth.patch, path)
            paths.append(path)
        written += paths
        written.append(composite(paths, root / f"{core_id}_composite.png"))
    return written

