import csv
import shutil
import time
from dataclasses import replace

import numpy as np
import pytest
import yaml
from PIL import Image

from denem.data import PatchSpec, SynthConfig
from denem.data.synthetic import DEFAULT_CENTERS
from denem.ensemble import EncoderArch, load_checkpoint
from denem.harness import pipeline as pl
from denem.harness.cli import main
from denem.harness.config import (
    ABLATION_ROWS,
    DataConfig,
    ExperimentConfig,
    desk_scale,
    from_dict,
    load_config,
    save_config,
)
from denem.harness.training import member_core_scores, score_auroc, train_fold, warmup_cosine


def tiny_config(tmp, **kw):
    synth = SynthConfig(px_per_mm=6.4, patch=PatchSpec(resize_to=(32, 32)), max_patches_per_core=4)
    data = DataConfig(n_patients=6, cores_per_patient=2, cancer_rate=0.5, centers=list(DEFAULT_CENTERS[:3]),
                      synth=synth, val_fraction=0.34)
    base = dict(arch=EncoderArch(widths=(8, 16, 32, 64), input_size=32), num_members=2, epochs=2,
                data=data, dataset=str(tmp / "data"), out_dir=str(tmp / "run"), lr_grid=(1e-2,), steps_grid=(1,))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = tiny_config(tmp)
    pl.cmd_synth(cfg)
    rec = pl.cmd_train(cfg, ("single", "ensemble", "ensemble_mi"))
    return cfg, rec


# -- config ---------------------------------------------------------------------

def test_config_invariants(tmp_path):
    with pytest.raises(ValueError):
        tiny_config(tmp_path, method="denem", num_members=1)
    with pytest.raises(ValueError):
        tiny_config(tmp_path, method="sar")
    with pytest.raises(ValueError):
        tiny_config(tmp_path, arch=EncoderArch.desk())  # 64 px encoder vs 32 px patches
    assert tiny_config(tmp_path, method="resnet10", num_members=1).variant == "single"
    with pytest.raises(ValueError):
        from_dict({"epochz": 3})


def test_config_roundtrip(tmp_path):
    cfg = tiny_config(tmp_path, method="memo", seed=4)
    again = from_dict(cfg.to_dict())
    assert again == cfg and again.config_hash() == cfg.config_hash()
    path = save_config(cfg, tmp_path / "c.yaml")
    assert load_config(path) == cfg
    assert load_config(path, {"seed": 5}).seed == 5
    assert tiny_config(tmp_path, seed=1).config_hash() != cfg.config_hash()


def test_desk_profile():
    cfg = desk_scale()
    assert cfg.epochs == 10 and cfg.batch_size == 32 and cfg.num_members == 5
    assert cfg.arch.input_size == 64 and cfg.data.synth.patch.resize_to == (64, 64)
    n = len(cfg.data.centers) * cfg.data.n_patients * cfg.data.cores_per_patient
    assert n <= 200
    assert len({(c.gain, c.speckle_scale, c.texture_frequency, c.attenuation_slope) for c in cfg.data.centers}) == 5


def test_warmup_cosine_schedule():
    f = warmup_cosine(100, 0.05)
    values = [f(s) for s in range(100)]
    assert values[0] == pytest.approx(0.2) and values[4] == pytest.approx(1.0)
    assert all(a >= b for a, b in zip(values[4:], values[5:]))
    assert values[-1] < 1e-3


# -- synth ----------------------------------------------------------------------

def test_synth_deterministic(tmp_path):
    cfg = tiny_config(tmp_path)
    a = pl.cmd_synth(cfg, tmp_path / "a")
    b = pl.cmd_synth(cfg, tmp_path / "b")
    assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
    for f in sorted((a / "cores").iterdir()):
        with np.load(f) as x, np.load(b / "cores" / f.name) as y:
            assert np.array_equal(x["patches"], y["patches"])


def test_synth_desk_scale_budget(tmp_path):
    cfg = replace(desk_scale(), dataset=str(tmp_path / "desk"))
    start = time.perf_counter()
    root = pl.cmd_synth(cfg)
    elapsed = time.perf_counter() - start
    rows = list(csv.DictReader(open(root / "manifest.csv")))
    assert len(rows) <= 200 and len({r["center_id"] for r in rows}) == 5
    assert elapsed < 60


# -- train ----------------------------------------------------------------------

def test_train_needs_dataset(tmp_path):
    with pytest.raises(pl.PipelineError, match="dataset"):
        pl.cmd_train(tiny_config(tmp_path))


def test_train_writes_checkpoints(trained):
    cfg, rec = trained
    assert sorted(rec.flags["training"]) == ["C1", "C2", "C3"]
    for variant, members in (("single", 1), ("ensemble", 2), ("ensemble_mi", 2)):
        for center in ("C1", "C2", "C3"):
            model = load_checkpoint(pl.checkpoint_dir(cfg, variant, center))
            assert model.num_members == members


def test_single_is_plain_network_path(tmp_path):
    # lambda = 0 and one member: cross-entropy only
    cfg = tiny_config(tmp_path, method="resnet10", num_members=1)
    assert cfg.members_for("single") == 1 and cfg.lambda_for("single") == 0.0


def test_training_loss_decreases_on_desk_data(tmp_path):
    cfg = replace(desk_scale(), method="resnet10", epochs=5, num_members=1)
    cfg = replace(cfg, data=replace(cfg.data, n_patients=6, centers=list(DEFAULT_CENTERS[:2])))
    cores = pl.synthesize(cfg)
    res = train_fold(cores, cores[:8], cfg, [123], 0.0)
    losses = [h["loss"] for h in res.history]
    assert all(np.isfinite(losses)) and losses[-1] < losses[0]


def test_checkpoint_reload_same_validation(trained):
    cfg, _ = trained
    cores = pl.load_cores(cfg)
    fold = pl.fold_plan(cores, cfg).folds[0]
    _, val, _ = fold.select(cores)
    directory = pl.checkpoint_dir(cfg, "ensemble", fold.test_center)
    a = member_core_scores(load_checkpoint(directory), val)
    b = member_core_scores(load_checkpoint(directory), val)
    assert np.array_equal(a, b)
    assert score_auroc(a.mean(0), val) == score_auroc(b.mean(0), val)


# -- eval -----------------------------------------------------------------------

def test_eval_aggregate_csv(trained):
    cfg, _ = trained
    rec = pl.cmd_eval(replace(cfg, method="ensemble"))
    rows = (pl.Path(cfg.out_dir) / "eval" / "aggregate.csv").read_text().splitlines()
    assert rows[0] == "method,test_center,auroc,auroc_all,balanced_acc,ece"
    assert len(rows) == 1 + 3 + 1 and rows[-1].startswith("ensemble,mean±std")
    assert len(rec.fold_reports["ensemble"]) == 3


def test_denem_zero_steps_equals_ensemble_mi(trained):
    cfg, _ = trained
    cfg0 = replace(cfg, adapt_sweep=False, adaptation=replace(cfg.adaptation, steps=0))
    a, _, _ = pl.evaluate_methods(cfg0, ["denem", "ensemble_mi"])
    assert [r.__dict__ for r in a["denem"]] == [r.__dict__ for r in a["ensemble_mi"]]


def test_adaptation_is_the_only_difference(trained):
    # the ensemble checkpoint scored without and with marginal-entropy adaptation
    cfg, _ = trained
    cores = pl.load_cores(cfg)
    _, _, test = pl.fold_plan(cores, cfg).folds[0].select(cores)
    model = pl.load_variant(cfg, "ensemble", "C1")
    plain, _ = pl.score_cores(model, test, "ensemble", cfg, cfg.adaptation)
    zero, traces = pl.score_cores(model, test, "ensemble_me", cfg, replace(cfg.adaptation, steps=0))
    assert plain == zero and len(traces) == len(test)
    moved, _ = pl.score_cores(model, test, "ensemble_me", cfg, replace(cfg.adaptation, lr_adapt=0.1, steps=3))
    assert moved != plain


def test_method_checkpoint_mismatch(trained, tmp_path):
    cfg, _ = trained
    bad = replace(cfg, out_dir=str(tmp_path / "other"))
    src = pl.checkpoint_dir(cfg, "ensemble", "C1")
    dst = pl.checkpoint_dir(bad, "ensemble_mi", "C1")
    dst.parent.mkdir(parents=True)
    shutil.copytree(src, dst)
    with pytest.raises(pl.PipelineError, match="ensemble_mi"):
        pl.load_variant(bad, "denem", "C1")
    with pytest.raises(pl.PipelineError, match="checkpoint"):
        pl.load_variant(bad, "denem", "C2")


def test_eval_traces_written(trained):
    cfg, _ = trained
    rec = pl.cmd_eval(replace(cfg, method="tent"))
    files = sorted((pl.Path(cfg.out_dir) / "eval").glob("tent_*_traces.jsonl"))
    assert len(files) == 3
    assert rec.flags["adaptation"]["tent"]["C1"]["lr_adapt"] == 1e-2


# -- ablation -------------------------------------------------------------------

def test_ablation_rows(trained):
    cfg, _ = trained
    rec = pl.cmd_ablate(cfg, train=False)
    table = list(csv.DictReader(open(pl.Path(cfg.out_dir) / "ablation" / "table.csv")))
    assert [r["method"] for r in table] == ["resnet10", "ensemble", "ensemble_mi", "ensemble_me", "denem"]
    ours = table[-1]
    assert all(ours[k] == "1" for k in ("group_norm", "ensemble", "mutual_info", "test_adapt"))
    assert rec.flags["rows"] == dict(ABLATION_ROWS)
    again = pl.RunRecord.from_json(rec.to_json())
    assert again.flags["rows"]["denem"]["test_adapt"] is True
    assert again.experiment_config() == cfg


def test_ablation_norm_comparison(trained):
    cfg, _ = trained
    cfg = replace(cfg, compare_norms=True)
    pl.cmd_train(cfg, ("single",), norm_kind="batch")
    rec = pl.cmd_ablate(cfg, train=False)
    rows = (pl.Path(cfg.out_dir) / "ablation" / "norm_comparison.csv").read_text().splitlines()
    assert {r.split(",")[0] for r in rows[1:]} == {"batch", "group"}
    assert len(rec.fold_reports["resnet10_batchnorm"]) == 3


# -- heatmaps -------------------------------------------------------------------

def test_heatmap_outputs(trained):
    cfg, _ = trained
    core_id = pl.load_cores(cfg)[0].core_id
    paths = pl.cmd_heatmap(cfg, [core_id])
    assert len(paths) == 3 and all(p.exists() for p in paths)
    h, w = (round(28 * 6.4), round(46 * 6.4))
    for p in paths[:2]:
        assert Image.open(p).size == (w, h)
    assert Image.open(paths[2]).size == (2 * w + 4, h)


def test_heatmap_unknown_frame(trained):
    cfg, _ = trained
    with pytest.raises(pl.PipelineError, match="unknown frame"):
        pl.cmd_heatmap(cfg, ["C9-p999-c99"])


# -- records and determinism ----------------------------------------------------------

def test_run_record_roundtrip(trained):
    cfg, rec = trained
    again = pl.RunRecord.from_json(rec.to_json())
    assert again == rec
    assert again.experiment_config() == cfg
    assert again.config_hash == cfg.config_hash()


def test_pipeline_determinism_and_workers(tmp_path):
    outputs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 2)):
        cfg = tiny_config(tmp_path / name, method="denem", workers=workers)
        pl.cmd_synth(cfg)
        pl.cmd_train(cfg, ("ensemble_mi",))
        pl.cmd_eval(cfg)
        outputs.append((pl.Path(cfg.out_dir) / "eval" / "aggregate.csv").read_text())
    assert outputs[0] == outputs[1] == outputs[2]


# -- CLI --------------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    cfg = tiny_config(tmp_path, method="ensemble")
    path = save_config(cfg, tmp_path / "cfg.yaml")
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "data")]) == 0
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "run"), "--seed", "0"]) == 0
    assert main(["eval", "--config", str(path), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "eval" / "aggregate.csv").exists()


def test_cli_errors(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    path = save_config(cfg, tmp_path / "cfg.yaml")
    assert main(["eval", "--config", str(path), "--out", str(tmp_path / "nothing")]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("denem: error:")
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump({"method": "nope"}))
    assert main(["synth", "--config", str(tmp_path / "bad.yaml")]) != 0
    assert "method" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["frobnicate"])
