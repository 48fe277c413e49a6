"""Core-level metrics, calibration, fold reports and heatmap export."""
import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.stats import rankdata

from denem.data.geometry import PatchSpec, RFFrame, crop_windows, resize_windows, window_grid
from denem.ensemble import EnsembleModel, forward_marginal

INVOLVEMENT_THRESHOLD = 0.40
REPORT_COLUMNS = ["method", "test_center", "auroc", "auroc_all", "balanced_acc", "ece"]


@dataclass
class CorePrediction:
    core_id: str
    score: float
    label: int
    involvement: float = 0.0
    center_id: str = ""

    def __post_init__(self):
        if not 0 <= self.score <= 1:
            raise ValueError(f"core {self.core_id}: score {self.score} outside [0, 1]")


@dataclass
class CalibrationReport:
    bin_edges: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray
    count: np.ndarray
    ece: float


@dataclass
class FoldReport:
    test_center: str
    auroc: float
    auroc_all: float
    balanced_acc: float
    ece: float
    n_cores_filtered: int
    n_cores_all: int
    threshold: float = 0.5

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def filter_involvement(preds: Sequence[CorePrediction], threshold: float = INVOLVEMENT_THRESHOLD) -> List[CorePrediction]:
    """Drop cancer cores with involvement at or below ``threshold``; benign cores always stay."""
    return [p for p in preds if p.label == 0 or p.involvement > threshold]


def _scores_labels(preds):
    scores = np.array([p.score for p in preds], dtype=float)
    labels = np.array([p.label for p in preds], dtype=int)
    return scores, labels


def _require_both_classes(labels, what):
    if len(labels) == 0:
        raise ValueError(f"{what} is undefined on an empty prediction set")
    if labels.min() == labels.max():
        raise ValueError(f"{what} needs both classes present")


def auroc(preds: Sequence[CorePrediction]) -> float:
    """Mann-Whitney AUROC with ties counted as half a win."""
    scores, labels = _scores_labels(preds)
    _require_both_classes(labels, "AUROC")
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    wins = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(wins / (n_pos * n_neg))


def balanced_accuracy(preds: Sequence[CorePrediction], decision_threshold: float = 0.5) -> float:
    """Mean of sensitivity and specificity, predicting cancer when ``score >= threshold``."""
    scores, labels = _scores_labels(preds)
    _require_both_classes(labels, "balanced accuracy")
    predicted = scores >= decision_threshold
    sensitivity = predicted[labels == 1].mean()
    specificity = (~predicted[labels == 0]).mean()
    return float((sensitivity + specificity) / 2)


def select_threshold(preds: Sequence[CorePrediction]) -> float:
    """Decision threshold maximising balanced accuracy on ``preds``.

    Candidates are midpoints between consecutive distinct scores; ties go to
    the candidate closest to 0.5.
    """
    scores, labels = _scores_labels(preds)
    _require_both_classes(labels, "threshold selection")
    distinct = np.unique(scores)
    candidates = np.concatenate([[distinct[0]], (distinct[1:] + distinct[:-1]) / 2, [np.nextafter(distinct[-1], 2)]])
    best, best_key = 0.5, None
    for t in candidates:
        key = (balanced_accuracy(preds, t), -abs(t - 0.5))
        if best_key is None or key > best_key:
            best, best_key = float(t), key
    return best


def ece(preds: Sequence[CorePrediction], n_bins: int = 10) -> CalibrationReport:
    """Expected calibration error over equal-width confidence bins.

    Confidence is the probability of the predicted class, so for binary
    scores it lies in ``[0.5, 1]``. Bins are right-closed, with confidence 0
    assigned to the first bin.
    """
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    scores, labels = _scores_labels(preds)
    if len(scores) == 0:
        raise ValueError("ECE needs at least one prediction")
    predicted = (scores >= 0.5).astype(int)
    conf = np.where(predicted == 1, scores, 1 - scores)
    correct = (predicted == labels).astype(float)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        bin_conf = np.where(count > 0, conf_sum / count, 0.0)
        bin_acc = np.where(count > 0, acc_sum / count, 0.0)
    value = float(np.sum(count / len(scores) * np.abs(bin_acc - bin_conf)))
    return CalibrationReport(edges, bin_conf, bin_acc, count, value)


def evaluate_fold(core_preds: Sequence[CorePrediction], decision_threshold: float = 0.5,
                  involvement_threshold: float = INVOLVEMENT_THRESHOLD) -> FoldReport:
    """Table-style metrics for the cores of one held-out center.

    AUROC and balanced accuracy use the involvement-filtered cores; AUROC-All
    and ECE use every core.
    """
    if len(core_preds) == 0:
        raise ValueError("cannot evaluate an empty test set")
    centers = {p.center_id for p in core_preds}
    if len(centers) > 1:
        raise ValueError(f"a fold holds one test center, got {sorted(centers)}")
    filtered = filter_involvement(core_preds, involvement_threshold)
    return FoldReport(
        test_center=centers.pop(),
        auroc=auroc(filtered),
        auroc_all=auroc(core_preds),
        balanced_acc=balanced_accuracy(filtered, decision_threshold),
        ece=ece(core_preds).ece,
        n_cores_filtered=len(filtered),
        n_cores_all=len(core_preds),
        threshold=decision_threshold,
    )


def summarize(reports: Sequence[FoldReport]) -> dict:
    """Mean and sample standard deviation of each metric across folds."""
    out = {}
    for key in ("auroc", "auroc_all", "balanced_acc", "ece"):
        values = np.array([getattr(r, key) for r in reports], dtype=float)
        out[key] = float(values.mean())
        out[key + "_std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def write_fold_reports(reports: Sequence[FoldReport], path) -> Path:
    path = Path(path)
    path.write_text("".join(r.to_json() + "\n" for r in reports))
    return path


def write_aggregate_csv(method_reports: dict, path) -> Path:
    """One row per (method, center) plus a ``mean±std`` row per method."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for method, reports in method_reports.items():
            for r in reports:
                writer.writerow([method, r.test_center, _fmt(r.auroc), _fmt(r.auroc_all), _fmt(r.balanced_acc),
                                 _fmt(r.ece)])
            s = summarize(reports)
            writer.writerow([method, "mean±std"] + [f"{s[k]:.6f}±{s[k + '_std']:.6f}" for k in REPORT_COLUMNS[2:]])
    return path


# -- heatmaps ----------------------------------------------------------------

@dataclass
class Heatmap:
    probability: np.ndarray  # (H, W), NaN where no window reaches
    coverage: np.ndarray  # (H, W) number of covering windows
    window_probs: np.ndarray
    boxes: np.ndarray
    path: Optional[Path] = None


@torch.no_grad()
def heatmap_values(model: EnsembleModel, frame: RFFrame, spec: PatchSpec, batch_size: int = 128,
                   predict=None) -> Heatmap:
    """Average cancer probability of all windows covering each pixel."""
    grid = window_grid(frame, spec)
    predict = predict or (lambda x: forward_marginal(model, x)[:, 1])
    probs = []
    for start in range(0, len(grid.boxes), batch_size):
        windows = resize_windows(crop_windows(frame, grid.boxes[start:start + batch_size]), spec.resize_to)
        probs.append(predict(torch.from_numpy(windows)[:, None]).float().numpy())
    window_probs = np.concatenate(probs).astype(np.float64)
    h, w = frame.samples.shape
    total = np.zeros((h + 1, w + 1))
    count = np.zeros((h + 1, w + 1))
    # 2-D difference arrays: one corner update per window, then cumulative sums
    for (r0, c0, r1, c1), p in zip(grid.boxes, window_probs):
        for arr, v in ((total, p), (count, 1.0)):
            arr[r0, c0] += v
            arr[r0, c1] -= v
            arr[r1, c0] -= v
            arr[r1, c1] += v
    total = total.cumsum(0).cumsum(1)[:h, :w]
    count = np.rint(count.cumsum(0).cumsum(1)[:h, :w])
    with np.errstate(invalid="ignore", divide="ignore"):
        prob = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return Heatmap(prob, count.astype(int), window_probs, grid.boxes)


def render_heatmap(frame: RFFrame, probability: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """RGB uint8 overlay: blue (benign, 0) to red (cancer, 1) over the log-compressed envelope."""
    env = np.abs(frame.samples.astype(float))
    db = 20 * np.log10(np.maximum(env, 1e-12) / max(env.max(), 1e-12))
    gray = np.clip((db + 50) / 50, 0, 1)
    base = np.repeat(gray[..., None], 3, axis=-1)
    p = np.clip(np.nan_to_num(probability, nan=0.5), 0, 1)
    color = np.stack([p, np.zeros_like(p), 1 - p], axis=-1)
    a = np.where(np.isnan(probability), 0.0, alpha)[..., None]
    return np.round(255 * ((1 - a) * base + a * color)).astype(np.uint8)


def export_heatmap(model: EnsembleModel, frame: RFFrame, spec: PatchSpec, path, predict=None) -> Heatmap:
    """Slide the model over the whole frame and write the overlay as PNG."""
    result = heatmap_values(model, frame, spec, predict=predict)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_heatmap(frame, result.probability)).save(path)
    result.path = path
    return result


def composite(paths: Sequence, out) -> Path:
    """Place PNGs side by side with a 4-pixel white gutter."""
    images = [Image.open(p).convert("RGB") for p in paths]
    gutter = 4
    width = sum(i.width for i in images) + gutter * (len(images) - 1)
    canvas = Image.new("RGB", (width, max(i.height for i in images)), "white")
    x = 0
    for im in images:
        canvas.paste(im, (x, 0))
        x += im.width + gutter
    out = Path(out)
    canvas.save(out)
    return out

