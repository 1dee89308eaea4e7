"""
On-disk formats for recordings, frame datasets, checkpoints and reports.

Every binary file is little-endian IEEE-754 float32 (or uint8 for labels),
row-major, next to a JSON document describing its shape. Nothing else is
needed to read them back, and round-trips are bit-exact.
"""

import csv
import json
import os
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

from .common import CorruptDatasetError, IncompatibleCheckpointError, InvalidArgumentError
from .evaluation import MetricsReport
from .models import ModelSpec, SensorGraph
from .signal import FrameSet, Recording
from .training import ModelCheckpoint, TrainMetadata

PathLike = Union[str, Path]

RECORDING_META = "meta.json"
RECORDING_DATA = "data.f32"
FRAMES_DATA = "frames.f32"
FRAMES_LABELS = "labels.u8"
FRAMES_INDEX = "index.json"
CHECKPOINT_META = "model.json"
CHECKPOINT_WEIGHTS = "weights.f32"
CHECKPOINT_FORMAT = "megspike-checkpoint"
CHECKPOINT_VERSION = 1
GRAPH_BUFFER = "graph.adjacency"

_F32 = np.dtype("<f4")
_U8 = np.dtype("u1")


def _write_json(path: Path, payload: Any):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def _read_json(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        raise CorruptDatasetError(f"{path}: missing")
    try:
        with open(path) as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise CorruptDatasetError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(payload, dict):
        raise CorruptDatasetError(f"{path}: expected a JSON object")
    return payload


def _require(meta: Dict[str, Any], keys: Iterable[str], path: Path):
    missing = [k for k in keys if k not in meta]
    if missing:
        raise CorruptDatasetError(f"{path}: missing keys {missing}")


def _read_binary(path: Path, dtype: np.dtype, count: int) -> np.ndarray:
    """Exactly `count` items of `dtype`, converted to a writable native-endian array"""
    if not path.is_file():
        raise CorruptDatasetError(f"{path}: missing")
    expected = count * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise CorruptDatasetError(f"{path}: expected {expected} bytes, found {actual}")
    raw = np.fromfile(path, dtype=dtype, count=count)
    return raw.astype(dtype.newbyteorder("="), copy=True)


def _write_binary(path: Path, values: np.ndarray, dtype: np.dtype):
    np.ascontiguousarray(values, dtype=dtype).tofile(path)


# ---------------------------------------------------------------------------
# Recordings
# ---------------------------------------------------------------------------

def save_recording(rec: Recording, directory: PathLike):
    """meta.json plus data.f32 (sensor-major float32)"""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_binary(d / RECORDING_DATA, rec.data, _F32)
    _write_json(d / RECORDING_META, {
        "patient_id": rec.patient_id,
        "sample_rate_hz": rec.sample_rate,
        "ns": rec.n_sensors,
        "n_samples": rec.n_samples,
        "spike_times_s": [float(t) for t in rec.spike_times],
        "sensor_positions_m": np.asarray(rec.sensor_positions, dtype=np.float64).tolist(),
    })


def load_recording(directory: PathLike) -> Recording:
    d = Path(directory)
    meta_path = d / RECORDING_META
    meta = _read_json(meta_path)
    _require(meta, ("patient_id", "sample_rate_hz", "ns", "n_samples", "spike_times_s", "sensor_positions_m"),
             meta_path)
    ns, n_samples = int(meta["ns"]), int(meta["n_samples"])
    data = _read_binary(d / RECORDING_DATA, _F32, ns * n_samples).reshape(ns, n_samples)
    try:
        return Recording(
            patient_id=str(meta["patient_id"]),
            sample_rate=float(meta["sample_rate_hz"]),
            data=data,
            sensor_positions=np.asarray(meta["sensor_positions_m"], dtype=np.float64),
            spike_times=np.asarray(meta["spike_times_s"], dtype=np.float64),
        )
    except InvalidArgumentError as e:
        raise CorruptDatasetError(f"{meta_path}: {e}") from e


# ---------------------------------------------------------------------------
# Frame datasets
# ---------------------------------------------------------------------------

def save_frames(frames: FrameSet, directory: PathLike, sensor_positions: Optional[np.ndarray] = None):
    """frames.f32 [n x ns x nt], labels.u8 [n] and index.json"""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_binary(d / FRAMES_DATA, frames.data, _F32)
    _write_binary(d / FRAMES_LABELS, frames.labels, _U8)
    index: Dict[str, Any] = {
        "ns": frames.n_sensors,
        "nt": frames.n_times,
        "n_frames": len(frames),
        "frames": [{"patient_id": str(pid), "start_time_s": float(t)}
                   for pid, t in zip(frames.patient_ids, frames.start_times)],
    }
    if sensor_positions is not None:
        index["sensor_positions_m"] = np.asarray(sensor_positions, dtype=np.float64).tolist()
    _write_json(d / FRAMES_INDEX, index)


def _frames_index(d: Path) -> Dict[str, Any]:
    index_path = d / FRAMES_INDEX
    index = _read_json(index_path)
    _require(index, ("ns", "nt", "n_frames", "frames"), index_path)
    if len(index["frames"]) != int(index["n_frames"]):
        raise CorruptDatasetError(
            f"{index_path}: {len(index['frames'])} index entries for {index['n_frames']} frames")
    return index


def load_frames(directory: PathLike) -> FrameSet:
    d = Path(directory)
    index = _frames_index(d)
    n, ns, nt = int(index["n_frames"]), int(index["ns"]), int(index["nt"])
    data = _read_binary(d / FRAMES_DATA, _F32, n * ns * nt).reshape(n, ns, nt)
    labels = _read_binary(d / FRAMES_LABELS, _U8, n)
    if not np.isin(labels, (0, 1)).all():
        raise CorruptDatasetError(f"{d / FRAMES_LABELS}: labels must be 0 or 1")
    try:
        ids = [str(entry["patient_id"]) for entry in index["frames"]]
        starts = np.array([float(entry["start_time_s"]) for entry in index["frames"]], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptDatasetError(f"{d / FRAMES_INDEX}: malformed frame entry ({e})") from e
    return FrameSet(data, labels, np.asarray(ids, dtype=str).reshape(-1), starts)


def load_sensor_positions(directory: PathLike) -> Optional[np.ndarray]:
    """Sensor positions stored alongside a frame dataset, if any"""
    positions = _frames_index(Path(directory)).get("sensor_positions_m")
    return None if positions is None else np.asarray(positions, dtype=np.float64)


# ---------------------------------------------------------------------------
# Patient directories
# ---------------------------------------------------------------------------

def patient_dirs(directory: PathLike, marker: str) -> List[Path]:
    """Sorted sub-directories of `directory` containing `marker`"""
    root = Path(directory)
    if not root.is_dir():
        raise CorruptDatasetError(f"{root}: not a directory")
    return sorted(p for p in root.iterdir() if (p / marker).is_file())


def dataset_kind(directory: PathLike) -> str:
    """'recordings' or 'frames', depending on what the patient directories hold"""
    if patient_dirs(directory, RECORDING_META):
        return "recordings"
    if patient_dirs(directory, FRAMES_INDEX):
        return "frames"
    raise CorruptDatasetError(f"{directory}: no recordings or frame datasets found")


def iter_recordings(directory: PathLike) -> Iterator[Recording]:
    """Recordings under `directory`, loaded one at a time"""
    for p in patient_dirs(directory, RECORDING_META):
        yield load_recording(p)


def load_frame_store(directory: PathLike) -> Tuple["OrderedDict[str, FrameSet]", Optional[np.ndarray]]:
    """Per-patient frame datasets keyed by patient id, and the first stored sensor positions"""
    frames: "OrderedDict[str, FrameSet]" = OrderedDict()
    positions = None
    for p in patient_dirs(directory, FRAMES_INDEX):
        fs = load_frames(p)
        ids = set(fs.patient_ids.tolist())
        pid = ids.pop() if len(ids) == 1 else p.name
        if pid in frames:
            raise CorruptDatasetError(f"{directory}: patient {pid!r} stored twice")
        frames[pid] = fs
        if positions is None:
            positions = load_sensor_positions(p)
    return frames, positions


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _checkpoint_arrays(ckpt: ModelCheckpoint) -> "OrderedDict[str, np.ndarray]":
    arrays = OrderedDict(ckpt.arrays)
    if ckpt.spec.uses_graph:
        arrays[GRAPH_BUFFER] = ckpt.graph.adjacency
    return arrays


def _expected_shapes(spec: ModelSpec) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes = spec.parameter_shapes()
    shapes.update(spec.buffer_shapes())
    if spec.uses_graph:
        shapes[GRAPH_BUFFER] = (spec.ns, spec.ns)
    return shapes


def save_checkpoint(ckpt: ModelCheckpoint, directory: PathLike):
    """model.json (spec, metadata, manifest) plus weights.f32 in manifest order"""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    blobs = []
    for name, values in _checkpoint_arrays(ckpt).items():
        blob = np.ascontiguousarray(values, dtype=_F32)
        manifest.append({"name": name, "shape": list(blob.shape), "offset": offset, "length": blob.nbytes})
        offset += blob.nbytes
        blobs.append(blob.reshape(-1))
    weights = np.concatenate(blobs) if blobs else np.zeros(0, dtype=_F32)
    weights.tofile(d / CHECKPOINT_WEIGHTS)
    _write_json(d / CHECKPOINT_META, {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "metadata": ckpt.metadata.to_dict(),
        "manifest": manifest,
    })


def load_checkpoint(directory: PathLike, expected_kind: Optional[str] = None) -> ModelCheckpoint:
    """Validate every manifest entry against the stored spec and rebuild the checkpoint"""
    d = Path(directory)
    meta_path = d / CHECKPOINT_META
    meta = _read_json(meta_path)
    _require(meta, ("format", "version", "spec", "metadata", "manifest"), meta_path)
    if meta["format"] != CHECKPOINT_FORMAT or meta["version"] != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{meta_path}: unsupported format {meta['format']} v{meta['version']}")
    try:
        spec = ModelSpec.from_dict(meta["spec"])
    except (InvalidArgumentError, TypeError) as e:
        raise IncompatibleCheckpointError(f"{meta_path}: invalid model spec ({e})") from e
    if expected_kind is not None and spec.kind != expected_kind:
        raise IncompatibleCheckpointError(f"{d}: checkpoint holds a {spec.kind} model, expected {expected_kind}")

    expected = _expected_shapes(spec)
    manifest = meta["manifest"]
    names = [entry.get("name") for entry in manifest]
    if names != list(expected):
        raise IncompatibleCheckpointError(f"{meta_path}: manifest entries do not match a {spec.kind} model")
    offset = 0
    for entry in manifest:
        shape = tuple(entry.get("shape", ()))
        if shape != expected[entry["name"]]:
            raise IncompatibleCheckpointError(
                f"{meta_path}: {entry['name']} has shape {shape}, expected {expected[entry['name']]}")
        length = int(np.prod(shape)) * _F32.itemsize
        if entry.get("offset") != offset or entry.get("length") != length:
            raise IncompatibleCheckpointError(f"{meta_path}: {entry['name']} has an inconsistent offset or length")
        offset += length

    weights = _read_binary(d / CHECKPOINT_WEIGHTS, _F32, offset // _F32.itemsize)
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in manifest:
        start = entry["offset"] // _F32.itemsize
        count = entry["length"] // _F32.itemsize
        arrays[entry["name"]] = weights[start:start + count].reshape(entry["shape"]).copy()

    graph = None
    if spec.uses_graph:
        try:
            graph = SensorGraph(arrays.pop(GRAPH_BUFFER).astype(np.float64))
        except InvalidArgumentError as e:
            raise CorruptDatasetError(f"{d / CHECKPOINT_WEIGHTS}: invalid sensor graph ({e})") from e
    return ModelCheckpoint(spec, arrays, TrainMetadata.from_dict(meta["metadata"]), graph)


def update_checkpoint_metadata(ckpt: ModelCheckpoint, directory: PathLike):
    """Rewrite model.json after metadata changes; weights.f32 is left alone"""
    d = Path(directory)
    meta = _read_json(d / CHECKPOINT_META)
    meta["metadata"] = ckpt.metadata.to_dict()
    _write_json(d / CHECKPOINT_META, meta)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

METRICS_JSON = "metrics.json"
METRICS_TABLE = "metrics.txt"
THRESHOLD_CURVE = "threshold_curve.csv"


def write_report(report: MetricsReport, directory: PathLike) -> Dict[str, Path]:
    """metrics.json, metrics.txt and threshold_curve.csv; no timestamps, so reruns are byte-identical"""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"json": d / METRICS_JSON, "table": d / METRICS_TABLE, "curve": d / THRESHOLD_CURVE}
    _write_json(paths["json"], report.to_dict())
    paths["table"].write_text(report.format_table())
    with open(paths["curve"], "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["threshold"] + [f"{kind}_f1_percent" for kind in report.model_kinds])
        for row in report.curve_table():
            writer.writerow([f"{row['threshold']:.3f}"] + [f"{row[kind]:.6f}" for kind in report.model_kinds])
    return paths


def write_predictions(path: PathLike, frames: FrameSet, probs: np.ndarray, threshold: float):
    """CSV of patient_id, start_time_s, probability, label (probability >= threshold)"""
    p = Path(path)
    if p.parent and not p.parent.exists():
        os.makedirs(p.parent, exist_ok=True)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size != len(frames):
        raise InvalidArgumentError(f"{probs.size} probabilities for {len(frames)} frames")
    with open(p, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["patient_id", "start_time_s", "probability", "label"])
        for pid, start, prob in zip(frames.patient_ids, frames.start_times, probs):
            writer.writerow([pid, f"{start:.6f}", f"{prob:.9f}", int(prob >= threshold)])
