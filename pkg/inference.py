"""
Five-View Inference and Metrics

Every image is scored at the four lung positions and the entire view. The
five probabilities are reduced with the threshold rule

    max(p)   if max(p) > eta
    mean(p)  otherwise

and the resulting scores are summarized as ACC / AUC / F1 / AP percentages.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from encoder import FrozenEncoders, encode_image, encode_text, predict
from errors import NotEnoughImagesError, PPADIOError, SingleClassInputError
from imaging import GrayImage, list_dataset, load_image
from prompts import CLASS_NAMES, VIEW_NAMES, PromptParams, assemble_image, assemble_text
from trainer import Checkpoint, TrainConfig, build_encoders, verify_checkpoint

DECISION_THRESHOLD = 0.5


# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass(frozen=True)
class ViewProbabilities:
    """p(abnormal) per view, ordered (left, right, upper, lower, entire)."""
    values: Tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if len(values) != len(VIEW_NAMES):
            raise ValueError(f"Need {len(VIEW_NAMES)} view probabilities, got {len(values)}")
        for v in values:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"Probability {v} outside [0, 1]")
        object.__setattr__(self, "values", values)

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(VIEW_NAMES, self.values))


@dataclass(frozen=True)
class Metrics:
    """Percentages in [0, 100]."""
    acc: float
    auc: float
    f1: float
    ap: float


@dataclass(frozen=True)
class MetricSummary:
    """Mean and population std of Metrics over repeated runs."""
    mean: Metrics
    std: Metrics
    runs: Tuple[Metrics, ...]


def summarize_metrics(runs: Sequence[Metrics]) -> MetricSummary:
    """
    Per-metric mean and std (ddof 0) over runs.

    Raises:
        ValueError: no runs
    """
    if not runs:
        raise ValueError("No runs to summarize")
    table = np.array([[m.acc, m.auc, m.f1, m.ap] for m in runs], dtype=np.float64)
    return MetricSummary(
        mean=Metrics(*(float(v) for v in table.mean(axis=0))),
        std=Metrics(*(float(v) for v in table.std(axis=0))),
        runs=tuple(runs),
    )


@dataclass(frozen=True)
class ScoreEntry:
    path: str
    probability: float
    label: int
    views: Optional[ViewProbabilities] = None


@dataclass(frozen=True)
class EvalReport:
    entries: Tuple[ScoreEntry, ...]
    metrics: Metrics
    eta: float
    prompt_mode: str = ""

    @property
    def acc(self) -> float:
        return self.metrics.acc

    @property
    def auc(self) -> float:
        return self.metrics.auc

    @property
    def f1(self) -> float:
        return self.metrics.f1

    @property
    def ap(self) -> float:
        return self.metrics.ap

    def to_dict(self) -> dict:
        return {
            "metrics": {"acc": self.acc, "auc": self.auc, "f1": self.f1, "ap": self.ap},
            "eta": self.eta,
            "prompt_mode": self.prompt_mode,
            "images": [
                {
                    "path": e.path,
                    "probability": e.probability,
                    "label": e.label,
                    "views": e.views.as_dict() if e.views is not None else None,
                }
                for e in self.entries
            ],
        }


# ============================================================================
# SCORING
# ============================================================================

def score_image(img: GrayImage, params: PromptParams, enc: FrozenEncoders,
                config: Optional[TrainConfig] = None) -> ViewProbabilities:
    """
    p(abnormal) for each of the five views.

    Modes without position views score the entire view only and report that
    value for all five slots.
    """
    config = config if config is not None else TrainConfig.defaults()
    scores = {}
    for view in config.views():
        normal_feat, pneu_feat = (encode_text(assemble_text(view, name, params, enc.embed_table), enc)
                                  for name in CLASS_NAMES)
        patches = assemble_image(img, config.image_view(view), params, enc.embed_patches)
        scores[view.name] = predict(encode_image(patches, enc), normal_feat, pneu_feat, enc.logit_scale)

    if len(scores) == 1:
        (only,) = scores.values()
        return ViewProbabilities((only,) * len(VIEW_NAMES))
    return ViewProbabilities(tuple(scores[name] for name in VIEW_NAMES))


def aggregate(probs, eta: float) -> float:
    """
    max if it strictly exceeds eta, else the arithmetic mean.

    The mean uses an exactly rounded sum, so the result does not depend on the
    order of the views.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    values = probs.values if isinstance(probs, ViewProbabilities) else tuple(float(v) for v in probs)
    peak = max(values)
    if peak > eta:
        return peak
    return math.fsum(values) / len(values)


# ============================================================================
# METRICS
# ============================================================================

def _split(scores: Sequence[Tuple[float, int]]) -> Tuple[np.ndarray, np.ndarray]:
    if len(scores) == 0:
        raise SingleClassInputError("No scores given")
    probs = np.array([float(s) for s, _ in scores], dtype=np.float64)
    labels = np.array([int(l) for _, l in scores], dtype=np.int64)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("Labels must be 0 or 1")
    return probs, labels


def _require_both_classes(labels: np.ndarray) -> None:
    if labels.min() == labels.max():
        raise SingleClassInputError("AUC and AP need both normal and abnormal items")


def roc_auc(probs: Sequence[float], labels: Sequence[int]) -> float:
    """AUC as a fraction, via midranks (ties count one half)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    _require_both_classes(labels)
    ranks = rankdata(probs)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(probs: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    (fpr, tpr, thresholds) at every distinct score, highest first.

    The curve starts at (0, 0) with an infinite threshold.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    _require_both_classes(labels)
    order = np.argsort(-probs, kind="mergesort")
    sorted_probs = probs[order]
    sorted_labels = labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(sorted_probs))[0], len(sorted_probs) - 1]
    tps = np.cumsum(sorted_labels)[last_of_group]
    fps = (last_of_group + 1) - tps
    tpr = np.r_[0.0, tps / tps[-1]]
    fpr = np.r_[0.0, fps / fps[-1]]
    thresholds = np.r_[np.inf, sorted_probs[last_of_group]]
    return fpr, tpr, thresholds


def trapezoid_auc(x: np.ndarray, y: np.ndarray) -> float:
    """Area under a piecewise-linear curve."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def average_precision(probs: Sequence[float], labels: Sequence[int]) -> float:
    """
    Mean precision at the rank of each abnormal item, as a fraction.

    Items are ranked by descending score; inside a tie, normal items rank
    first. Raising an abnormal score therefore never lowers AP.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    _require_both_classes(labels)
    order = np.lexsort((labels, -probs))
    positive = labels[order] == 1
    precision = np.cumsum(positive) / np.arange(1, len(order) + 1)
    return float(np.mean(precision[positive]))


def compute_metrics(scores: Sequence[Tuple[float, int]]) -> Metrics:
    """
    ACC and F1 at p >= 0.5 (positive = abnormal), midrank AUC and AP, all in percent.

    Raises:
        SingleClassInputError: only one label present
    """
    probs, labels = _split(scores)
    _require_both_classes(labels)
    predicted = probs >= DECISION_THRESHOLD
    positive = labels == 1
    tp = int(np.sum(predicted & positive))
    fp = int(np.sum(predicted & ~positive))
    fn = int(np.sum(~predicted & positive))
    acc = float(np.mean(predicted == positive))
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    return Metrics(
        acc=100.0 * acc,
        auc=100.0 * roc_auc(probs, labels),
        f1=100.0 * f1,
        ap=100.0 * average_precision(probs, labels),
    )


# ============================================================================
# DATASET EVALUATION
# ============================================================================

def score_dataset(dataset_root, params: PromptParams, enc: FrozenEncoders, config: TrainConfig,
                  verbose: bool = False) -> EvalReport:
    """
    Score normal/ (label 0) and abnormal/ (label 1) images under dataset_root.

    Raises:
        NotEnoughImagesError: no images at all
        SingleClassInputError: only one class folder has images
    """
    normal_paths, abnormal_paths = list_dataset(dataset_root)
    labelled = [(p, 0) for p in normal_paths] + [(p, 1) for p in abnormal_paths]
    if not labelled:
        raise NotEnoughImagesError(f"No images under {Path(dataset_root)}/normal or /abnormal")

    entries = []
    for i, (path, label) in enumerate(labelled):
        views = score_image(load_image(path, config.run["image_size"]), params, enc, config)
        entries.append(ScoreEntry(path=str(path), probability=aggregate(views, config.eta), label=label, views=views))
        if verbose and (i + 1) % 50 == 0:
            print(f"  Scored {i + 1}/{len(labelled)} images")

    metrics = compute_metrics([(e.probability, e.label) for e in entries])
    return EvalReport(entries=tuple(entries), metrics=metrics, eta=config.eta, prompt_mode=config.mode.name)


def evaluate(dataset_root, checkpoint: Checkpoint, verbose: bool = False) -> EvalReport:
    """
    Rebuild the frozen encoder from the checkpoint's config, verify its hash,
    then score the dataset with the learned prompts.

    Raises:
        CheckpointError: the checkpoint was trained against different frozen weights
    """
    config = TrainConfig.from_run_config(checkpoint.config)
    enc = build_encoders(config)
    verify_checkpoint(checkpoint, enc)
    return score_dataset(dataset_root, checkpoint.params, enc, config, verbose=verbose)


def write_report(report: EvalReport, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise PPADIOError(f"Cannot write report {path}: {e}") from e


def format_report_table(report: EvalReport) -> str:
    """Aligned text summary of the four metrics."""
    n_abnormal = sum(e.label for e in report.entries)
    lines = [
        "=" * 44,
        f"  EVALUATION ({report.prompt_mode}, eta={report.eta})",
        "=" * 44,
        f"  Images  : {len(report.entries)} ({len(report.entries) - n_abnormal} normal, {n_abnormal} abnormal)",
        "─" * 44,
        f"  {'Metric':<8}{'Value (%)':>12}",
    ]
    for name, value in (("ACC", report.acc), ("AUC", report.auc), ("F1", report.f1), ("AP", report.ap)):
        lines.append(f"  {name:<8}{value:>12.2f}")
    lines.append("=" * 44)
    return "\n".join(lines)


def _metric_values(m: Metrics) -> Tuple[float, float, float, float]:
    return m.acc, m.auc, m.f1, m.ap


def format_comparison_table(rows: Sequence[Tuple[str, Union[Metrics, MetricSummary]]]) -> str:
    """One line per named run, used by the ablation command. Summaries print as mean ± std."""
    cells = []
    for name, m in rows:
        if isinstance(m, MetricSummary):
            values = [f"{a:.2f} ± {s:.2f}" for a, s in zip(_metric_values(m.mean), _metric_values(m.std))]
        else:
            values = [f"{v:.2f}" for v in _metric_values(m)]
        cells.append((name, values))

    width = max([len("Mode")] + [len(name) for name, _ in cells])
    col = max([7] + [len(v) for _, values in cells for v in values])
    header = f"  {'Mode':<{width}}" + "".join(f"  {h:>{col}}" for h in ("ACC", "AUC", "F1", "AP"))
    lines = [header, "─" * len(header)]
    for name, values in cells:
        lines.append(f"  {name:<{width}}" + "".join(f"  {v:>{col}}" for v in values))
    return "\n".join(lines)

