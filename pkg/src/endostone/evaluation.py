"""Group-aware stratified splitting, the diagnostic metric battery, mixed-stone
scoring, confusion matrices and repeated cross-validation.

Splits are stratified on images but grouped by stone: every image of a
physical stone lands on one side, and per class the test side greedily packs
whole stones until its image count best approximates the requested fraction.

Pure-class metrics are exact-class one-vs-rest. Mixed-class metrics credit a
detection when at least one component morphology is predicted (per-component
modes) or when the exact mixed class is predicted ("both" mode); negatives
count as false positives when they are predicted as a positive-set class other
than their own true class.
"""

from __future__ import annotations

import csv
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .dataset import (
    CLASS_ORDER,
    MIXED_CLASSES,
    PURE_CLASSES,
    ClassLabel,
    Morphology,
    StoneObservation,
    View,
    preprocess_image,
)
from .model import ModelConfig, Prediction, TrainConfig, TrainedModel, build_model
from .model import predict as model_predict
from .model import train as model_train

# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitPlan:
    train: list[str]  # observation ids
    test: list[str]
    seed: int | None = None


def stratified_group_split(
    corpus: list[StoneObservation],
    test_fraction: float = 0.30,
    rng: int | np.random.Generator = 0,
) -> SplitPlan:
    """Assign whole stones to the test side, per class, until the class's test
    image count best approximates test_fraction of its images.

    No stone ever straddles the split. A stone is added while doing so moves
    the class's test image count strictly closer to the target.
    """
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError("test_fraction must lie in [0, 1]")
    if isinstance(rng, (int, np.integer)):
        seed: int | None = int(rng)
        gen = np.random.default_rng(seed)
    else:
        seed = None
        gen = rng

    stones_by_class: dict[ClassLabel, dict[str, int]] = defaultdict(dict)
    stone_label: dict[str, ClassLabel] = {}
    for obs in corpus:
        prior = stone_label.setdefault(obs.stone_id, obs.label)
        if prior != obs.label:
            raise ValueError(f"stone {obs.stone_id!r} carries conflicting labels")
        counts = stones_by_class[obs.label]
        counts[obs.stone_id] = counts.get(obs.stone_id, 0) + 1

    test_stones: set[str] = set()
    for label in CLASS_ORDER:
        counts = stones_by_class.get(label)
        if not counts:
            continue
        stone_ids = sorted(counts)
        order = gen.permutation(len(stone_ids))
        target = test_fraction * sum(counts.values())
        assigned = 0
        for i in order:
            sid = stone_ids[i]
            size = counts[sid]
            if size < 2 * (target - assigned):
                test_stones.add(sid)
                assigned += size
        if target >= 1 and assigned == 0:
            warnings.warn(
                f"class {label.value}: no stone assignment approximates the "
                f"test fraction; keeping all {len(stone_ids)} stones in train"
            )

    plan = SplitPlan(train=[], test=[], seed=seed)
    for obs in corpus:
        (plan.test if obs.stone_id in test_stones else plan.train).append(obs.observation_id)
    return plan


# ---------------------------------------------------------------------------
# binary counts and metrics


@dataclass
class BinaryCounts:
    tp: float = 0.0
    fp: float = 0.0
    tn: float = 0.0
    fn: float = 0.0

    @property
    def total(self) -> float:
        return self.tp + self.fp + self.tn + self.fn


METRIC_NAMES = ("accuracy", "auroc", "sensitivity", "specificity", "ppv", "npv", "fpr", "fnr")
METRIC_DISPLAY = {
    "accuracy": "accuracy",
    "auroc": "AUROC",
    "sensitivity": "sensitivity",
    "specificity": "specificity",
    "ppv": "PPV",
    "npv": "NPV",
    "fpr": "FPR",
    "fnr": "FNR",
}


@dataclass
class MetricSet:
    """Diagnostic metrics as percentages (AUROC in [0, 1]); None marks a
    metric whose denominator was zero (undefined, never coerced to 0)."""

    accuracy: float | None = None
    auroc: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    ppv: float | None = None
    npv: float | None = None
    fpr: float | None = None
    fnr: float | None = None

    def as_dict(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def metrics_from_counts(c: BinaryCounts) -> MetricSet:
    """Definitional metrics from a 2x2 table; AUROC is left unset."""
    if min(c.tp, c.fp, c.tn, c.fn) < 0:
        raise ValueError("negative counts")
    if c.total == 0:
        raise ValueError("all counts zero")

    def ratio(num: float, den: float) -> float | None:
        return 100.0 * num / den if den > 0 else None

    sensitivity = ratio(c.tp, c.tp + c.fn)
    specificity = ratio(c.tn, c.tn + c.fp)
    return MetricSet(
        accuracy=100.0 * (c.tp + c.tn) / c.total,
        auroc=None,
        sensitivity=sensitivity,
        specificity=specificity,
        ppv=ratio(c.tp, c.tp + c.fp),
        npv=ratio(c.tn, c.tn + c.fn),
        fpr=None if specificity is None else 100.0 - specificity,
        fnr=None if sensitivity is None else 100.0 - sensitivity,
    )


def binarize(
    preds: list[tuple[Prediction, ClassLabel]], positive: ClassLabel
) -> BinaryCounts:
    """Exact-class one-vs-rest collapse of multi-class predictions."""
    counts = BinaryCounts()
    for pred, truth in preds:
        is_positive = truth == positive
        predicted_positive = pred.argmax_class == positive
        if is_positive and predicted_positive:
            counts.tp += 1
        elif is_positive:
            counts.fn += 1
        elif predicted_positive:
            counts.fp += 1
        else:
            counts.tn += 1
    return counts


class MixedMode(Enum):
    AT_LEAST_FIRST = "at_least_first"  # the Ia component is predicted
    AT_LEAST_SECOND = "at_least_second"  # the other component is predicted
    BOTH = "both"  # the exact mixed class is predicted

    def display(self, mixed: ClassLabel) -> str:
        second = _second_component(mixed)
        if self is MixedMode.AT_LEAST_FIRST:
            return f"at least {Morphology.IA.value}"
        if self is MixedMode.AT_LEAST_SECOND:
            return f"at least {second.value}"
        return f"both {Morphology.IA.value} and {second.value}"


def _second_component(mixed: ClassLabel) -> Morphology:
    others = [m for m in mixed.components if m is not Morphology.IA]
    if len(others) != 1 or len(mixed.components) != 2:
        raise ValueError(f"mixed-mode scoring applies only to mixed classes, got {mixed.value}")
    return others[0]


def positive_class_set(mixed: ClassLabel, mode: MixedMode) -> frozenset[ClassLabel]:
    """The predicted classes that count as detecting `mixed` under `mode`."""
    second = _second_component(mixed)
    if mode is MixedMode.BOTH:
        return frozenset({mixed})
    component = Morphology.IA if mode is MixedMode.AT_LEAST_FIRST else second
    return frozenset(c for c in CLASS_ORDER if component in c.components)


def binarize_mixed(
    preds: list[tuple[Prediction, ClassLabel]], mixed: ClassLabel, mode: MixedMode
) -> BinaryCounts:
    """Mixed-stone scoring. Positives (truth == mixed) are detected when the
    predicted class falls in the mode's positive set; negatives are false
    positives when predicted as a positive-set class other than their truth."""
    pos_set = positive_class_set(mixed, mode)
    counts = BinaryCounts()
    for pred, truth in preds:
        predicted = pred.argmax_class
        if truth == mixed:
            if predicted in pos_set:
                counts.tp += 1
            else:
                counts.fn += 1
        else:
            if predicted in pos_set and predicted != truth:
                counts.fp += 1
            else:
                counts.tn += 1
    return counts


def auroc(scores: list[float] | np.ndarray, labels: list[bool] | np.ndarray) -> float:
    """Probability that a random positive outscores a random negative, ties
    counting one half (rank-statistic formulation)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# confusion matrix


@dataclass
class ConfusionMatrix:
    """5x5 real-valued counts, predicted class (rows) x actual class (columns),
    in CLASS_ORDER. Counts are real because cross-validation averages are
    rendered the same way."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.shape != (5, 5):
            raise ValueError("confusion matrix must be 5x5")

    @classmethod
    def from_predictions(cls, preds: list[tuple[Prediction, ClassLabel]]) -> "ConfusionMatrix":
        counts = np.zeros((5, 5))
        for pred, truth in preds:
            counts[pred.argmax_class.index, truth.index] += 1
        return cls(counts)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def column_total(self, label: ClassLabel) -> float:
        return float(self.counts[:, label.index].sum())

    def row_total(self, label: ClassLabel) -> float:
        return float(self.counts[label.index, :].sum())

    def column_sensitivity(self, label: ClassLabel) -> float | None:
        total = self.column_total(label)
        if total == 0:
            return None
        return 100.0 * float(self.counts[label.index, label.index]) / total

    def row_ppv(self, label: ClassLabel) -> float | None:
        total = self.row_total(label)
        if total == 0:
            return None
        return 100.0 * float(self.counts[label.index, label.index]) / total

    def overall_accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return 100.0 * float(np.trace(self.counts)) / self.total

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["predicted\\actual"] + [c.value for c in CLASS_ORDER] + ["PPV%"])
            for row_label in CLASS_ORDER:
                ppv = self.row_ppv(row_label)
                writer.writerow(
                    [row_label.value]
                    + [f"{self.counts[row_label.index, c.index]:.6g}" for c in CLASS_ORDER]
                    + ["" if ppv is None else f"{ppv:.1f}"]
                )
            sens_row = []
            for c in CLASS_ORDER:
                s = self.column_sensitivity(c)
                sens_row.append("" if s is None else f"{s:.1f}")
            writer.writerow(["sensitivity%"] + sens_row + [f"{self.overall_accuracy():.1f}"])


def render_confusion_png(matrix: ConfusionMatrix, path: str | Path, title: str = "") -> None:
    """Confusion-matrix figure: green diagonal / red off-diagonal count cells,
    PPV column on the right, sensitivity row at the bottom and the overall
    cell bottom-right."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(CLASS_ORDER)
    fig, ax = plt.subplots(figsize=(8.5, 7.5))
    ax.set_xlim(0, n + 1)
    ax.set_ylim(0, n + 1)
    ax.invert_yaxis()
    ax.axis("off")
    total = matrix.total

    def cell(x, y, color):
        ax.add_patch(plt.Rectangle((x, y), 1, 1, facecolor=color, edgecolor="white"))

    for i, pred_label in enumerate(CLASS_ORDER):
        for j, actual_label in enumerate(CLASS_ORDER):
            count = matrix.counts[i, j]
            pct = 100.0 * count / total if total else 0.0
            color = "#b7e1b0" if i == j else ("#f3c6c6" if count > 0 else "#f7efef")
            cell(j, i, color)
            ax.text(
                j + 0.5, i + 0.5, f"{count:.4g}\n{pct:.1f}%", ha="center", va="center", fontsize=9
            )
        ppv = matrix.row_ppv(pred_label)
        cell(n, i, "#e8e8e8")
        if ppv is not None:
            ax.text(
                n + 0.5,
                i + 0.5,
                f"{ppv:.0f}%\n{100 - ppv:.0f}%",
                ha="center",
                va="center",
                fontsize=9,
            )
    for j, actual_label in enumerate(CLASS_ORDER):
        sens = matrix.column_sensitivity(actual_label)
        cell(j, n, "#e8e8e8")
        if sens is not None:
            ax.text(
                j + 0.5,
                n + 0.5,
                f"{sens:.0f}%\n{100 - sens:.0f}%",
                ha="center",
                va="center",
                fontsize=9,
            )
    overall = matrix.overall_accuracy()
    cell(n, n, "#bcd3ee")
    ax.text(
        n + 0.5, n + 0.5, f"{overall:.0f}%\n{100 - overall:.0f}%", ha="center", va="center", fontsize=9
    )
    for j, actual_label in enumerate(CLASS_ORDER):
        ax.text(j + 0.5, -0.15, actual_label.value, ha="center", va="center", fontsize=10)
    for i, pred_label in enumerate(CLASS_ORDER):
        ax.text(-0.1, i + 0.5, pred_label.value, ha="right", va="center", fontsize=10)
    ax.text((n + 1) / 2, -0.55, title or "actual stone type", ha="center", fontsize=11)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class MetricAggregate:
    mean: float | None
    std: float | None  # sample standard deviation (ddof=1); 0.0 for one run
    n: int  # runs where the metric was defined
    n_excluded: int  # runs where it was undefined
    single_sample: bool = False


@dataclass
class RunResult:
    repeat: int
    init_seed: int
    split_seed: int
    train_ids: list[str]
    test_ids: list[str]
    confusion: np.ndarray
    pure_counts: dict[ClassLabel, BinaryCounts]
    pure_metrics: dict[ClassLabel, MetricSet]
    mixed_counts: dict[tuple[ClassLabel, MixedMode], BinaryCounts]
    mixed_metrics: dict[tuple[ClassLabel, MixedMode], MetricSet]
    overall_accuracy: float


@dataclass
class EvaluationReport:
    view: View
    n_repeats: int
    init_seeds: list[int]
    base_seed: int
    test_fraction: float
    runs: list[RunResult]
    pure_table: dict[ClassLabel, dict[str, MetricAggregate]]
    mixed_table: dict[tuple[ClassLabel, MixedMode], dict[str, MetricAggregate]]
    mean_confusion: ConfusionMatrix
    overall_accuracy: MetricAggregate
    models: list[TrainedModel] = field(default_factory=list, repr=False)


def _derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def score_predictions(preds: list[tuple[Prediction, ClassLabel]]):
    """Per-run metric battery: pure one-vs-rest rows, mixed-mode rows and the
    confusion matrix, with AUROC from the predicted class probabilities."""
    pure_counts: dict[ClassLabel, BinaryCounts] = {}
    pure_metrics: dict[ClassLabel, MetricSet] = {}
    truths = np.array([truth.index for _, truth in preds])
    probs = np.stack([pred.probabilities for pred, _ in preds])
    for label in PURE_CLASSES:
        counts = binarize(preds, label)
        metrics = metrics_from_counts(counts)
        labels = truths == label.index
        if labels.any() and not labels.all():
            metrics.auroc = auroc(probs[:, label.index], labels)
        pure_counts[label] = counts
        pure_metrics[label] = metrics

    mixed_counts: dict[tuple[ClassLabel, MixedMode], BinaryCounts] = {}
    mixed_metrics: dict[tuple[ClassLabel, MixedMode], MetricSet] = {}
    for label in MIXED_CLASSES:
        for mode in MixedMode:
            counts = binarize_mixed(preds, label, mode)
            metrics = metrics_from_counts(counts)
            labels = truths == label.index
            if labels.any() and not labels.all():
                pos_set = positive_class_set(label, mode)
                scores = probs[:, [c.index for c in pos_set]].sum(axis=1)
                metrics.auroc = auroc(scores, labels)
            mixed_counts[(label, mode)] = counts
            mixed_metrics[(label, mode)] = metrics

    confusion = ConfusionMatrix.from_predictions(preds)
    return pure_counts, pure_metrics, mixed_counts, mixed_metrics, confusion


def _aggregate(values: list[float | None], n_runs: int) -> MetricAggregate:
    defined = [v for v in values if v is not None]
    if not defined:
        return MetricAggregate(mean=None, std=None, n=0, n_excluded=n_runs)
    mean = float(np.mean(defined))
    if len(defined) == 1:
        return MetricAggregate(
            mean=mean, std=0.0, n=1, n_excluded=n_runs - 1, single_sample=True
        )
    return MetricAggregate(
        mean=mean,
        std=float(np.std(defined, ddof=1)),
        n=len(defined),
        n_excluded=n_runs - len(defined),
    )


def cross_validate(
    corpus: list[StoneObservation],
    view: View,
    model_config: ModelConfig,
    train_config: TrainConfig,
    n_repeats: int = 10,
    init_seeds: list[int] | None = None,
    test_fraction: float = 0.30,
    base_seed: int = 0,
    keep_models: bool = False,
    progress=None,
) -> EvaluationReport:
    """Repeated split/train/test evaluation on one view.

    Each (repeat, init_seed) pair reshuffles the stone-grouped split, trains a
    fresh model and scores its test predictions; metrics are aggregated as
    mean +/- sample std, skipping undefined values with an exclusion count.
    Augmentation happens inside training only; test images are preprocessed,
    never augmented.
    """
    if init_seeds is None:
        init_seeds = [0, 1, 2]
    observations = [obs for obs in corpus if obs.view == view]
    if not observations:
        raise ValueError(f"no {view.value} observations in corpus")
    by_id = {obs.observation_id: obs for obs in observations}
    prepared = {
        obs.observation_id: preprocess_image(obs.image) for obs in observations
    }

    runs: list[RunResult] = []
    models: list[TrainedModel] = []
    for repeat in range(n_repeats):
        for si, init_seed in enumerate(init_seeds):
            split_seed = _derived_seed(base_seed, repeat, si, 0xA)
            plan = stratified_group_split(observations, test_fraction, rng=split_seed)
            if not plan.test or not plan.train:
                raise ValueError("corpus too small to split")
            model = build_model(
                ModelConfig(
                    backbone=model_config.backbone,
                    num_classes=model_config.num_classes,
                    input_size=model_config.input_size,
                    init_seed=init_seed,
                )
            )
            train_rng = np.random.default_rng(
                np.random.SeedSequence((base_seed, repeat, si, 0xB))
            )
            train_set = [(prepared[oid], by_id[oid].label) for oid in plan.train]
            model_train(model, train_set, train_config, train_rng)
            preds = [
                (model_predict(model, prepared[oid]), by_id[oid].label)
                for oid in plan.test
            ]
            pure_counts, pure_metrics, mixed_counts, mixed_metrics, confusion = (
                score_predictions(preds)
            )
            runs.append(
                RunResult(
                    repeat=repeat,
                    init_seed=init_seed,
                    split_seed=split_seed,
                    train_ids=list(plan.train),
                    test_ids=list(plan.test),
                    confusion=confusion.counts,
                    pure_counts=pure_counts,
                    pure_metrics=pure_metrics,
                    mixed_counts=mixed_counts,
                    mixed_metrics=mixed_metrics,
                    overall_accuracy=confusion.overall_accuracy(),
                )
            )
            if keep_models:
                models.append(model)
            if progress is not None:
                progress(repeat, init_seed, runs[-1])

    n_runs = len(runs)
    pure_table = {
        label: {
            name: _aggregate([run.pure_metrics[label].as_dict()[name] for run in runs], n_runs)
            for name in METRIC_NAMES
        }
        for label in PURE_CLASSES
    }
    mixed_table = {
        (label, mode): {
            name: _aggregate(
                [run.mixed_metrics[(label, mode)].as_dict()[name] for run in runs], n_runs
            )
            for name in METRIC_NAMES
        }
        for label in MIXED_CLASSES
        for mode in MixedMode
    }
    mean_confusion = ConfusionMatrix(np.mean([run.confusion for run in runs], axis=0))
    overall = _aggregate([run.overall_accuracy for run in runs], n_runs)
    return EvaluationReport(
        view=view,
        n_repeats=n_repeats,
        init_seeds=list(init_seeds),
        base_seed=base_seed,
        test_fraction=test_fraction,
        runs=runs,
        pure_table=pure_table,
        mixed_table=mixed_table,
        mean_confusion=mean_confusion,
        overall_accuracy=overall,
        models=models,
    )


# ---------------------------------------------------------------------------
# report serialization


def _aggregate_to_dict(agg: MetricAggregate) -> dict:
    return {
        "mean": agg.mean,
        "std": agg.std,
        "n": agg.n,
        "n_excluded": agg.n_excluded,
        "single_sample": agg.single_sample,
    }


def _counts_to_dict(c: BinaryCounts) -> dict:
    return {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn}


def report_to_dict(report: EvaluationReport) -> dict:
    """JSON-ready dict; key order is canonicalized by the JSON writer."""
    return {
        "view": report.view.value,
        "n_repeats": report.n_repeats,
        "init_seeds": report.init_seeds,
        "base_seed": report.base_seed,
        "test_fraction": report.test_fraction,
        "overall_accuracy": _aggregate_to_dict(report.overall_accuracy),
        "mean_confusion": report.mean_confusion.counts.tolist(),
        "pure_table": {
            label.value: {
                name: _aggregate_to_dict(agg) for name, agg in row.items()
            }
            for label, row in report.pure_table.items()
        },
        "mixed_table": {
            label.value: {
                mode.value: {
                    name: _aggregate_to_dict(agg)
                    for name, agg in report.mixed_table[(label, mode)].items()
                }
                for mode in MixedMode
            }
            for label in MIXED_CLASSES
        },
        "runs": [
            {
                "repeat": run.repeat,
                "init_seed": run.init_seed,
                "split_seed": run.split_seed,
                "n_train": len(run.train_ids),
                "n_test": len(run.test_ids),
                "train_ids": run.train_ids,
                "test_ids": run.test_ids,
                "confusion": run.confusion.tolist(),
                "overall_accuracy": run.overall_accuracy,
                "pure_counts": {
                    label.value: _counts_to_dict(c) for label, c in run.pure_counts.items()
                },
                "mixed_counts": {
                    f"{label.value}/{mode.value}": _counts_to_dict(c)
                    for (label, mode), c in run.mixed_counts.items()
                },
            }
            for run in report.runs
        ],
    }


def _format_cell(agg: MetricAggregate, auroc_scale: bool = False) -> str:
    if agg.mean is None:
        return "n/a"
    fmt = "{:.2f} ± {:.2f}" if auroc_scale else "{:.1f} ± {:.1f}"
    cell = fmt.format(agg.mean, agg.std if agg.std is not None else 0.0)
    if agg.n_excluded:
        cell += f" ({agg.n_excluded} excluded)"
    return cell


def write_pure_table_csv(report: EvaluationReport, path: str | Path) -> None:
    """Per-pure-class diagnostic table (mean +/- std over runs)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stone_type"] + [METRIC_DISPLAY[name] for name in METRIC_NAMES])
        for label in PURE_CLASSES:
            row = report.pure_table[label]
            writer.writerow(
                [label.value]
                + [_format_cell(row[name], auroc_scale=(name == "auroc")) for name in METRIC_NAMES]
            )


def write_mixed_table_csv(report: EvaluationReport, path: str | Path) -> None:
    """Per-mixed-class table: one row per (class, detection mode)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["stone_type", "predicted_kidney_type"]
            + [METRIC_DISPLAY[name] for name in METRIC_NAMES]
        )
        for label in MIXED_CLASSES:
            for mode in MixedMode:
                row = report.mixed_table[(label, mode)]
                writer.writerow(
                    [label.value, mode.display(label)]
                    + [
                        _format_cell(row[name], auroc_scale=(name == "auroc"))
                        for name in METRIC_NAMES
                    ]
                )
