"""
Spike-class metrics, balanced and imbalanced test regimes, threshold moving
and cross-validation aggregation.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .common import EmptyClassError, InvalidArgumentError
from .models import MODEL_KINDS
from .signal import FramePool, FrameSet

BALANCED = "balanced"
IMBALANCED = "imbalanced"
REGIMES = (BALANCED, IMBALANCED)
METRIC_NAMES = ("accuracy", "f1", "specificity", "sensitivity")
DEFAULT_THRESHOLD = 0.5
HIGH_THRESHOLD = 0.9


def default_grid() -> np.ndarray:
    """0.001, 0.002, ..., 0.999"""
    return np.arange(1, 1000, dtype=np.float64) / 1000.0


@dataclass
class Metrics:
    """Confusion counts and spike-class metrics in percent"""
    accuracy: float
    f1: float
    specificity: float
    sensitivity: float
    tp: int
    fp: int
    tn: int
    fn: int

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.accuracy, self.f1, self.specificity, self.sensitivity

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num: float, den: float) -> float:
    return 100.0 * num / den if den else 0.0


def _check_pairs(probs, labels) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size != y.size:
        raise InvalidArgumentError(f"{p.size} probabilities but {y.size} labels")
    if p.size == 0:
        raise InvalidArgumentError("at least one prediction is required")
    if not np.isin(y, (0, 1)).all():
        raise InvalidArgumentError("labels must be 0 or 1")
    return p, y.astype(np.uint8)


def compute_metrics(probs, labels, threshold: float = DEFAULT_THRESHOLD) -> Metrics:
    """A frame is predicted positive iff its probability is >= threshold; 0/0 ratios are 0"""
    p, y = _check_pairs(probs, labels)
    predicted = p >= threshold
    positive = y == 1
    tp = int(np.sum(predicted & positive))
    fp = int(np.sum(predicted & ~positive))
    fn = int(np.sum(~predicted & positive))
    tn = int(np.sum(~predicted & ~positive))
    return Metrics(
        accuracy=_ratio(tp + tn, p.size),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        specificity=_ratio(tn, tn + fp),
        sensitivity=_ratio(tp, tp + fn),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def _f1_fraction(probs: np.ndarray, labels: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Spike-class f1 (as a fraction) at every grid threshold"""
    pos = np.sort(probs[labels == 1])
    neg = np.sort(probs[labels == 0])
    tp = pos.size - np.searchsorted(pos, grid, side="left")
    fp = neg.size - np.searchsorted(neg, grid, side="left")
    fn = pos.size - tp
    den = 2 * tp + fp + fn
    return np.where(den > 0, 2.0 * tp / np.maximum(den, 1), 0.0)


def threshold_curve(probs, labels, grid: Optional[Sequence[float]] = None) -> np.ndarray:
    """Spike-class f1 in percent for every threshold of `grid`"""
    p, y = _check_pairs(probs, labels)
    g = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    return 100.0 * _f1_fraction(p, y, g)


def optimal_threshold(probs, labels, grid: Optional[Sequence[float]] = None) -> float:
    """Smallest grid threshold that maximizes spike-class f1"""
    p, y = _check_pairs(probs, labels)
    if not np.any(y == 1):
        raise EmptyClassError("threshold calibration needs at least one spike frame")
    g = default_grid() if grid is None else np.sort(np.asarray(grid, dtype=np.float64))
    if g.size == 0:
        raise InvalidArgumentError("threshold grid is empty")
    return float(g[int(np.argmax(_f1_fraction(p, y, g)))])


def balanced_indices(labels, rng: np.random.Generator, shuffle: bool = True,
                     cap: bool = False) -> np.ndarray:
    """
    Every positive plus as many negatives drawn uniformly without replacement.

    With `cap`, a set holding fewer negatives than positives keeps every
    negative and as many positives, drawn the same way, so prevalence stays 0.5.
    """
    y = np.asarray(labels).reshape(-1)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if pos.size == 0:
        raise EmptyClassError("no spike frames to balance against")
    if neg.size < pos.size:
        if not cap:
            raise InvalidArgumentError(f"{pos.size} spike frames but only {neg.size} non-spike frames")
        if neg.size == 0:
            raise EmptyClassError("no non-spike frames to balance against")
        pos = np.sort(rng.choice(pos, size=neg.size, replace=False))
        chosen = neg
    else:
        chosen = np.sort(rng.choice(neg, size=pos.size, replace=False))
    idx = np.concatenate([pos, chosen])
    return idx[rng.permutation(idx.size)] if shuffle else np.sort(idx)


def balanced_test_sample(test_frames: FrameSet, rng: np.random.Generator) -> FrameSet:
    """All test positives plus an equal number of seeded-sampled test negatives (capped by the smaller class)"""
    return test_frames.subset(balanced_indices(test_frames.labels, rng, shuffle=False, cap=True))


# ---------------------------------------------------------------------------
# Per-iteration evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    """One regime of one model on one cross-validation iteration"""
    model_kind: str
    regime: str
    repetition: int
    fold: int
    threshold: float
    accuracy: float = 0.0
    f1: float = 0.0
    specificity: float = 0.0
    sensitivity: float = 0.0
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    skipped: bool = False
    skip_reason: str = ""

    @classmethod
    def from_metrics(cls, model_kind: str, regime: str, repetition: int, fold: int,
                     threshold: float, metrics: Metrics) -> "MetricsRow":
        return cls(model_kind, regime, repetition, fold, float(threshold), **asdict(metrics))

    @classmethod
    def skipped_row(cls, model_kind: str, regime: str, repetition: int, fold: int,
                    reason: str) -> "MetricsRow":
        return cls(model_kind, regime, repetition, fold, float("nan"), skipped=True, skip_reason=reason)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        if self.skipped:
            d["threshold"] = None
        return d


@dataclass
class IterationResult:
    """Both regimes for one model on one iteration, plus threshold-moving diagnostics"""
    model_kind: str
    repetition: int
    fold: int
    rows: List[MetricsRow]
    threshold: Optional[float] = None
    val_f1_at_threshold: Optional[float] = None
    val_f1_at_default: Optional[float] = None
    test_f1_at_threshold: Optional[float] = None
    test_f1_at_default: Optional[float] = None
    test_curve: Optional[np.ndarray] = field(default=None, repr=False)


FrameSource = Union[FrameSet, FramePool, Sequence[FrameSet]]


def _frame_parts(frames: FrameSource) -> List[FrameSet]:
    if isinstance(frames, FrameSet):
        return [frames]
    if isinstance(frames, FramePool):
        return frames.parts
    return list(frames)


def predict_frames(predictor, frames: FrameSource) -> Tuple[np.ndarray, np.ndarray]:
    """Probabilities and labels for every frame, predicted part by part"""
    probs, labels = [], []
    for part in _frame_parts(frames):
        if len(part):
            probs.append(np.asarray(predictor.predict_proba(part.data), dtype=np.float64))
            labels.append(part.labels)
    if not probs:
        return np.zeros(0), np.zeros(0, dtype=np.uint8)
    return np.concatenate(probs), np.concatenate(labels)


def evaluate_iteration(checkpoint, test_frames: FrameSource, val_frames: FrameSource,
                       rng: np.random.Generator, grid: Optional[Sequence[float]] = None,
                       repetition: int = 0, fold: int = 0) -> IterationResult:
    """
    Balanced regime: threshold 0.5 on a balanced sample of the test frames.
    Imbalanced regime: threshold calibrated on all validation-patient frames,
    applied to all test-patient frames. Test labels never reach the calibration.

    `checkpoint` is anything with `.spec.kind` and `.predict_proba(frames)`.
    """
    kind = checkpoint.spec.kind
    g = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    test_probs, test_labels = predict_frames(checkpoint, test_frames)
    if test_probs.size == 0:
        raise InvalidArgumentError("evaluate_iteration: no test frames")

    try:
        sample = balanced_indices(test_labels, rng, shuffle=False, cap=True)
        balanced = MetricsRow.from_metrics(kind, BALANCED, repetition, fold, DEFAULT_THRESHOLD,
                                           compute_metrics(test_probs[sample], test_labels[sample]))
    except EmptyClassError as e:
        balanced = MetricsRow.skipped_row(kind, BALANCED, repetition, fold, str(e))

    result = IterationResult(kind, repetition, fold, rows=[balanced])
    if np.any(test_labels == 1):
        result.test_curve = threshold_curve(test_probs, test_labels, g)

    val_probs, val_labels = predict_frames(checkpoint, val_frames)
    try:
        if val_probs.size == 0:
            raise EmptyClassError("no validation frames to calibrate on")
        threshold = optimal_threshold(val_probs, val_labels, g)
        if not np.any(test_labels == 1):
            raise EmptyClassError("no spike frames among test patients")
    except EmptyClassError as e:
        result.rows.append(MetricsRow.skipped_row(kind, IMBALANCED, repetition, fold, str(e)))
        return result

    test_metrics = compute_metrics(test_probs, test_labels, threshold)
    result.rows.append(MetricsRow.from_metrics(kind, IMBALANCED, repetition, fold, threshold, test_metrics))
    result.threshold = threshold
    result.val_f1_at_threshold = compute_metrics(val_probs, val_labels, threshold).f1
    result.val_f1_at_default = compute_metrics(val_probs, val_labels, DEFAULT_THRESHOLD).f1
    result.test_f1_at_threshold = test_metrics.f1
    result.test_f1_at_default = compute_metrics(test_probs, test_labels, DEFAULT_THRESHOLD).f1
    return result


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

@dataclass
class MetricSummary:
    mean: Optional[float]
    std: Optional[float]
    n: int

    def formatted(self) -> str:
        if self.mean is None:
            return "n/a"
        return f"{self.mean:.1f}±{self.std:.1f}"


def summarize(values: Sequence[float]) -> MetricSummary:
    """Population mean and standard deviation"""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return MetricSummary(None, None, 0)
    return MetricSummary(float(v.mean()), float(v.std()), int(v.size))


def _ordered_kinds(kinds) -> List[str]:
    known = [k for k in MODEL_KINDS if k in kinds]
    return known + sorted(k for k in kinds if k not in MODEL_KINDS)


@dataclass
class MetricsReport:
    """Cross-validation summary shaped like a model x metric table per regime"""
    model_kinds: List[str]
    summaries: Dict[str, Dict[str, Dict[str, MetricSummary]]]
    rows: List[MetricsRow]
    thresholds: Dict[str, List[Dict[str, Any]]]
    grid: np.ndarray
    threshold_curves: Dict[str, np.ndarray]

    @property
    def n_iterations(self) -> int:
        return len({(r.repetition, r.fold) for r in self.rows})

    def fraction_above(self, kind: str, level: float = HIGH_THRESHOLD) -> Optional[float]:
        chosen = [t["threshold"] for t in self.thresholds.get(kind, [])]
        if not chosen:
            return None
        return float(np.mean(np.asarray(chosen) > level))

    def table_rows(self) -> List[Dict[str, Any]]:
        out = []
        for kind in self.model_kinds:
            for regime in REGIMES:
                for metric in METRIC_NAMES:
                    s = self.summaries[kind][regime][metric]
                    out.append({"model": kind, "regime": regime, "metric": metric,
                                "mean": s.mean, "std": s.std, "n": s.n, "formatted": s.formatted()})
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_iterations": self.n_iterations,
            "model_kinds": list(self.model_kinds),
            "table": self.table_rows(),
            "thresholds": {
                kind: {
                    "chosen": self.thresholds.get(kind, []),
                    "fraction_above_0.9": self.fraction_above(kind),
                } for kind in self.model_kinds
            },
            "rows": [r.to_dict() for r in self.rows],
        }

    def curve_table(self) -> List[Dict[str, float]]:
        """Rows of (threshold, mean test f1 per model)"""
        out = []
        for i, t in enumerate(self.grid):
            row: Dict[str, float] = {"threshold": float(t)}
            for kind in self.model_kinds:
                curve = self.threshold_curves.get(kind)
                row[kind] = float(curve[i]) if curve is not None else float("nan")
            out.append(row)
        return out

    def format_table(self) -> str:
        width = max([len("model")] + [len(k) for k in self.model_kinds]) + 2
        header = "model".ljust(width) + "".join(m.ljust(14) for m in METRIC_NAMES)
        lines = []
        titles = {BALANCED: "Balanced test (threshold 0.5)",
                  IMBALANCED: "Imbalanced test (threshold calibrated on validation patients)"}
        for regime in REGIMES:
            lines.append(titles[regime])
            lines.append(header.rstrip())
            for kind in self.model_kinds:
                cells = [self.summaries[kind][regime][m].formatted().ljust(14) for m in METRIC_NAMES]
                lines.append((kind.ljust(width) + "".join(cells)).rstrip())
            lines.append("")
        lines.append("Calibrated thresholds")
        for kind in self.model_kinds:
            chosen = [t["threshold"] for t in self.thresholds.get(kind, [])]
            if chosen:
                frac = self.fraction_above(kind)
                lines.append(f"{kind.ljust(width)}mean {np.mean(chosen):.3f}, "
                             f"{100.0 * frac:.0f}% above {HIGH_THRESHOLD}")
            else:
                lines.append(f"{kind.ljust(width)}n/a")
        return "\n".join(lines) + "\n"


def aggregate_cv(items: Sequence[Union[IterationResult, MetricsRow]],
                 grid: Optional[Sequence[float]] = None) -> MetricsReport:
    """Mean and population std per (model, regime, metric); skipped rows are left out of both"""
    rows: List[MetricsRow] = []
    iterations: List[IterationResult] = []
    for item in items:
        if isinstance(item, IterationResult):
            iterations.append(item)
            rows.extend(item.rows)
        else:
            rows.append(item)
    if not rows:
        raise InvalidArgumentError("aggregate_cv: nothing to aggregate")

    rows.sort(key=lambda r: (r.repetition, r.fold, r.model_kind, REGIMES.index(r.regime)))
    iterations.sort(key=lambda it: (it.repetition, it.fold, it.model_kind))
    kinds = _ordered_kinds({r.model_kind for r in rows})

    summaries: Dict[str, Dict[str, Dict[str, MetricSummary]]] = {}
    for kind in kinds:
        summaries[kind] = {}
        for regime in REGIMES:
            kept = [r for r in rows if r.model_kind == kind and r.regime == regime and not r.skipped]
            summaries[kind][regime] = {m: summarize([getattr(r, m) for r in kept]) for m in METRIC_NAMES}

    g = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    thresholds: Dict[str, List[Dict[str, Any]]] = {kind: [] for kind in kinds}
    curves: Dict[str, np.ndarray] = {}
    for kind in kinds:
        mine = [it for it in iterations if it.model_kind == kind]
        for it in mine:
            if it.threshold is not None:
                thresholds[kind].append({
                    "repetition": it.repetition,
                    "fold": it.fold,
                    "threshold": it.threshold,
                    "val_f1_at_threshold": it.val_f1_at_threshold,
                    "val_f1_at_0.5": it.val_f1_at_default,
                    "test_f1_at_threshold": it.test_f1_at_threshold,
                    "test_f1_at_0.5": it.test_f1_at_default,
                })
        stacked = [it.test_curve for it in mine if it.test_curve is not None]
        if stacked:
            curves[kind] = np.mean(np.stack(stacked), axis=0)

    return MetricsReport(kinds, summaries, rows, thresholds, g, curves)
