"""
Patient-wise cross-validation and the Adam / BCE / early-stopping training loop.
"""

import dataclasses
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .common import InvalidArgumentError, print_info, print_phase_header, print_success, print_warning
from .evaluation import IterationResult, MetricsReport, aggregate_cv, balanced_indices, evaluate_iteration
from .models import MODEL_KINDS, TIMECNN, ModelSpec, SensorGraph, SpikeClassifier, build_adjacency
from .optim import ADAM_LR, Adam
from .rng import derive_rng, derive_seed
from .signal import (
    BANDPASS_HIGH_HZ,
    BANDPASS_LOW_HZ,
    TARGET_RATE_HZ,
    FramePool,
    FrameSet,
    Recording,
    extract_frames,
    preprocess_recording,
)
from .synth import geodesic_distances
from .tensor import Tensor, bce_loss


# ---------------------------------------------------------------------------
# Cross-validation plan
# ---------------------------------------------------------------------------

@dataclass
class CvIteration:
    repetition: int
    fold: int
    train_ids: List[str]
    val_ids: List[str]
    test_ids: List[str]


@dataclass
class CvPlan:
    """Test / validation / train patients for every (repetition, fold)"""
    patient_ids: List[str]
    folds: int
    repetitions: int
    val_fraction: float
    seed: int
    iterations: List[CvIteration] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def make_cv_plan(patient_ids: Sequence[str], folds: int = 10, repetitions: int = 5,
                 val_fraction: float = 0.10, seed: int = 0) -> CvPlan:
    """
    Per repetition a seeded shuffle splits the (sorted) patients into `folds`
    groups of floor or ceil size; each group is the test set once.
    ceil(val_fraction * |remaining|) validation patients are then drawn from
    the remaining patients, and the rest train.
    """
    ids = sorted(str(p) for p in patient_ids)
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("make_cv_plan: patient ids must be unique")
    if folds < 2:
        raise InvalidArgumentError(f"make_cv_plan: need at least 2 folds, got {folds}")
    if repetitions < 1:
        raise InvalidArgumentError("make_cv_plan: repetitions must be positive")
    if not 0 < val_fraction < 1:
        raise InvalidArgumentError("make_cv_plan: val_fraction must lie in (0, 1)")
    if len(ids) < folds:
        raise InvalidArgumentError(f"make_cv_plan: {len(ids)} patients cannot fill {folds} folds")

    plan = CvPlan(ids, folds, repetitions, val_fraction, seed)
    id_array = np.asarray(ids)
    for rep in range(repetitions):
        order = derive_rng(seed, "plan", rep).permutation(len(ids))
        groups = np.array_split(id_array[order], folds)
        for fold, test in enumerate(groups):
            test_set = set(test.tolist())
            pool = [p for p in ids if p not in test_set]
            n_val = max(1, math.ceil(val_fraction * len(pool)))
            if n_val >= len(pool):
                raise InvalidArgumentError(
                    f"make_cv_plan: {len(pool)} non-test patients leave no training patient after validation")
            val = derive_rng(seed, "plan-val", rep, fold).choice(len(pool), size=n_val, replace=False)
            val_set = {pool[i] for i in val}
            plan.iterations.append(CvIteration(
                repetition=rep,
                fold=fold,
                train_ids=[p for p in pool if p not in val_set],
                val_ids=sorted(val_set),
                test_ids=sorted(test_set),
            ))
    return plan


def balance_dataset(frames: Union[FrameSet, FramePool], rng: np.random.Generator) -> FrameSet:
    """All positives plus as many negatives sampled across every patient, in shuffled order"""
    idx = balanced_indices(frames.labels, rng)
    if isinstance(frames, FramePool):
        return frames.take(idx)
    return frames.subset(idx)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Optimization settings for one model"""
    model_kind: str = TIMECNN
    lr: float = ADAM_LR
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    dropout: float = 0.3
    seed: int = 0
    eval_batch_size: int = 256
    verbose: bool = False

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise InvalidArgumentError(f"train config: unknown model kind {self.model_kind!r}")
        for name in ("lr", "batch_size", "max_epochs", "patience", "eval_batch_size"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"train config: {name} must be positive")
        if self.patience > self.max_epochs:
            raise InvalidArgumentError("train config: patience cannot exceed max_epochs")
        if not 0 <= self.dropout < 1:
            raise InvalidArgumentError("train config: dropout must lie in [0, 1)")

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization"""
        return asdict(self)


@dataclass
class TrainMetadata:
    seed: int
    epochs_run: int = 0
    best_epoch: int = 0
    best_val_loss: float = float("nan")
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    threshold: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainMetadata":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(eq=False)
class ModelCheckpoint:
    """Trained weights, batchnorm running statistics and, for the GCN kind, the sensor graph"""
    spec: ModelSpec
    arrays: "OrderedDict[str, np.ndarray]"
    metadata: TrainMetadata
    graph: Optional[SensorGraph] = None

    def __post_init__(self):
        expected = list(self.spec.parameter_shapes()) + list(self.spec.buffer_shapes())
        if list(self.arrays) != expected:
            raise InvalidArgumentError(f"checkpoint arrays do not match a {self.spec.kind} model")
        if self.spec.uses_graph and (self.graph is None or self.graph.n != self.spec.ns):
            raise InvalidArgumentError(f"a {self.spec.kind} checkpoint needs a {self.spec.ns}-node sensor graph")
        self._model: Optional[SpikeClassifier] = None

    @classmethod
    def from_model(cls, model: SpikeClassifier, metadata: TrainMetadata,
                   graph: Optional[SensorGraph] = None) -> "ModelCheckpoint":
        return cls(model.spec, model.state_arrays(), metadata, graph if model.spec.uses_graph else None)

    def model(self) -> SpikeClassifier:
        if self._model is None:
            self._model = SpikeClassifier.from_state_arrays(self.spec, self.arrays)
        return self._model

    def predict_proba(self, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.model().predict_proba(frames, self.graph, batch_size)


def validation_loss(model: SpikeClassifier, frames: FrameSet, graph: Optional[SensorGraph],
                    batch_size: int = 256) -> float:
    """Eval-mode mean BCE over `frames`"""
    probs = model.predict_proba(frames.data, graph, batch_size)
    return bce_loss(Tensor(probs), frames.labels).item()


def train_model(cfg: TrainConfig, train_frames: FrameSet, val_frames: FrameSet,
                graph: Optional[SensorGraph] = None) -> ModelCheckpoint:
    """
    Xavier-initialized model trained with Adam on shuffled mini-batches.

    Validation BCE is computed in eval mode after every epoch. Training stops
    after `max_epochs` or once the validation loss has not improved for
    `patience` epochs, and the best-validation weights are restored.
    """
    if len(train_frames) == 0 or len(val_frames) == 0:
        raise InvalidArgumentError("train_model: training and validation frames must be non-empty")
    if val_frames.shape_per_frame != train_frames.shape_per_frame:
        raise InvalidArgumentError("train_model: training and validation frames differ in shape")
    spec = ModelSpec(kind=cfg.model_kind, ns=train_frames.n_sensors, nt=train_frames.n_times, dropout=cfg.dropout)
    if spec.uses_graph and graph is None:
        raise InvalidArgumentError("train_model: timecnn-gcn requires a sensor graph")
    if not spec.uses_graph:
        graph = None

    model = SpikeClassifier.build(spec, derive_rng(cfg.seed, "init"))
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    meta = TrainMetadata(seed=cfg.seed)
    x_all, y_all = train_frames.data, train_frames.labels
    n = len(train_frames)
    best_state = None
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(n)
        dropout_rng = derive_rng(cfg.seed, "dropout", epoch)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            probs = model.forward(Tensor(np.ascontiguousarray(x_all[idx])), graph, train=True, rng=dropout_rng)
            loss = bce_loss(probs, y_all[idx].astype(np.float32))
            loss.backward()
            optimizer.step()
            total += loss.item() * idx.size

        train_loss = total / n
        val_loss = validation_loss(model, val_frames, graph, cfg.eval_batch_size)
        meta.train_losses.append(train_loss)
        meta.val_losses.append(val_loss)
        meta.epochs_run = epoch
        if cfg.verbose:
            print_info(f"epoch {epoch}/{cfg.max_epochs} train={train_loss:.4f} val={val_loss:.4f}")

        if best_state is None or val_loss < meta.best_val_loss:
            meta.best_val_loss = val_loss
            meta.best_epoch = epoch
            best_state = model.state_arrays()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                if cfg.verbose:
                    print_info(f"early stop after epoch {epoch}, best epoch {meta.best_epoch}")
                break

    model.load_state_arrays(best_state)
    return ModelCheckpoint.from_model(model, meta, graph)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass
class PreprocessConfig:
    low: float = BANDPASS_LOW_HZ
    high: float = BANDPASS_HIGH_HZ
    target_rate: float = TARGET_RATE_HZ


@dataclass
class CohortFrames:
    """Framed patients keyed by id plus the sensor positions shared by the cohort"""
    frames: Dict[str, FrameSet]
    sensor_positions: Optional[np.ndarray] = None

    def pool(self, patient_ids: Sequence[str]) -> FramePool:
        return FramePool([self.frames[p] for p in patient_ids])

    def graph(self) -> SensorGraph:
        if self.sensor_positions is None:
            raise InvalidArgumentError("sensor positions are required to build the sensor graph")
        return build_adjacency(geodesic_distances(self.sensor_positions))


def frame_cohort(recordings: Iterable[Recording], preprocess: Optional[PreprocessConfig] = None) -> CohortFrames:
    """
    Preprocess and frame each recording once; ids are sorted.

    Recordings are consumed one at a time and only their frames are kept, so
    a generator never holds more than one raw recording in memory. Sensor
    positions come from the lowest patient id.
    """
    prep = preprocess or PreprocessConfig()
    frames: Dict[str, FrameSet] = {}
    positions: Dict[str, Optional[np.ndarray]] = {}
    for rec in recordings:
        pid = rec.patient_id
        if pid in frames:
            raise InvalidArgumentError(f"duplicate patient id {pid!r}")
        frames[pid] = extract_frames(preprocess_recording(rec, prep.low, prep.high, prep.target_rate))
        positions[pid] = rec.sensor_positions
        # drop the raw recording before the generator builds the next one
        del rec
    if not frames:
        raise InvalidArgumentError("empty cohort")
    ids = sorted(frames)
    return CohortFrames({pid: frames[pid] for pid in ids}, positions[ids[0]])


@dataclass
class CrossvalResult:
    iterations: List[IterationResult]
    checkpoints: Dict[Tuple[int, int, str], ModelCheckpoint]
    report: MetricsReport


def run_crossval(cohort: Union[Sequence[Recording], CohortFrames], cfg: TrainConfig, plan: CvPlan,
                 model_kinds: Sequence[str] = MODEL_KINDS, preprocess: Optional[PreprocessConfig] = None,
                 verbose: bool = False, keep_checkpoints: bool = True) -> CrossvalResult:
    """
    Train and evaluate every model kind on every plan iteration.

    Balanced train/validation sets and the balanced test sample are drawn once
    per iteration and shared by all model kinds. Seeds derive from the plan seed
    and (repetition, fold).
    """
    data = cohort if isinstance(cohort, CohortFrames) else frame_cohort(cohort, preprocess)
    if sorted(data.frames) != plan.patient_ids:
        raise InvalidArgumentError("run_crossval: plan patients do not match the cohort")
    for kind in model_kinds:
        if kind not in MODEL_KINDS:
            raise InvalidArgumentError(f"run_crossval: unknown model kind {kind!r}")
    graph = data.graph() if any(k != TIMECNN for k in model_kinds) else None

    results: List[IterationResult] = []
    checkpoints: Dict[Tuple[int, int, str], ModelCheckpoint] = {}
    for number, it in enumerate(plan.iterations, 1):
        if verbose:
            print_phase_header(number, f"repetition {it.repetition + 1}, fold {it.fold + 1}")
            print_info(f"train {len(it.train_ids)} / val {len(it.val_ids)} / test {len(it.test_ids)} patients")
        train_pool = data.pool(it.train_ids)
        val_pool = data.pool(it.val_ids)
        test_pool = data.pool(it.test_ids)
        train_set = balance_dataset(train_pool, derive_rng(plan.seed, "balance", it.repetition, it.fold))
        val_set = balance_dataset(val_pool, derive_rng(plan.seed, "balance-val", it.repetition, it.fold))

        for kind in model_kinds:
            kind_cfg = dataclasses.replace(
                cfg, model_kind=kind, seed=derive_seed(plan.seed, "train", it.repetition, it.fold, kind))
            ckpt = train_model(kind_cfg, train_set, val_set, graph)
            result = evaluate_iteration(ckpt, test_pool, val_pool,
                                        derive_rng(plan.seed, "test-sample", it.repetition, it.fold),
                                        repetition=it.repetition, fold=it.fold)
            ckpt.metadata.threshold = result.threshold
            results.append(result)
            if keep_checkpoints:
                checkpoints[(it.repetition, it.fold, kind)] = ckpt
            if verbose:
                balanced = result.rows[0]
                if balanced.skipped:
                    print_warning(f"{kind}: balanced test skipped ({balanced.skip_reason})")
                else:
                    print_success(f"{kind}: epochs {ckpt.metadata.epochs_run}, "
                                  f"balanced f1 {balanced.f1:.1f}%, threshold {result.threshold}")

    return CrossvalResult(results, checkpoints, aggregate_cv(results))
