#!/usr/bin/env python3
"""
Run configuration and run history for megspike
One flat JSON document drives synth, preprocessing, training and cross-validation
"""

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from .common import Colors, InvalidArgumentError
from .models import MODEL_KINDS
from .signal import BANDPASS_HIGH_HZ, BANDPASS_LOW_HZ, TARGET_RATE_HZ
from .synth import SynthConfig
from .training import PreprocessConfig, TrainConfig


@dataclass
class RunConfig:
    """Every knob of a run; a persisted copy fully determines the run"""
    seed: int = 0

    # Synthetic cohort
    n_patients: int = 95
    duration_s: float = 540.0
    n_sensors: int = 274
    sample_rate_hz: float = 150.0
    spike_rate_per_min: float = 5.4
    spike_amplitude_snr: float = 4.0
    focal_sigma_m: float = 0.03
    helmet_radius_m: float = 0.12
    amplitude_jitter: float = 0.1
    width_jitter: float = 0.1
    max_foci: int = 3

    # Preprocessing
    bandpass_low_hz: float = BANDPASS_LOW_HZ
    bandpass_high_hz: float = BANDPASS_HIGH_HZ
    target_rate_hz: float = TARGET_RATE_HZ

    # Models and training
    model_kinds: List[str] = field(default_factory=lambda: list(MODEL_KINDS))
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    dropout: float = 0.3

    # Cross-validation
    folds: int = 10
    repetitions: int = 5
    val_fraction: float = 0.1

    # Paths
    data_dir: str = ""
    out_dir: str = "runs/latest"
    save_checkpoints: bool = False

    def __post_init__(self):
        if not self.model_kinds:
            raise InvalidArgumentError("config: model_kinds must not be empty")
        for kind in self.model_kinds:
            if kind not in MODEL_KINDS:
                raise InvalidArgumentError(f"config: unknown model kind {kind!r}")
        if len(set(self.model_kinds)) != len(self.model_kinds):
            raise InvalidArgumentError("config: model_kinds contains duplicates")
        if self.seed < 0:
            raise InvalidArgumentError("config: seed must be non-negative")
        # Remaining ranges are checked by the configs derived from this one.
        self.synth_config()
        self.train_config()
        if self.folds < 2 or self.repetitions < 1 or not 0 < self.val_fraction < 1:
            raise InvalidArgumentError("config: need folds >= 2, repetitions >= 1 and 0 < val_fraction < 1")

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization"""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Build from a flat mapping; unknown keys and ill-typed values are rejected"""
        if not isinstance(data, Mapping):
            raise InvalidArgumentError("config: expected a JSON object")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(fields))
        if unknown:
            raise InvalidArgumentError(f"config: unknown keys {unknown}")
        defaults = {name: f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
                    for name, f in fields.items()}
        return cls(**{key: _coerce(key, value, defaults[key]) for key, value in data.items()})

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        path = Path(path)
        try:
            with open(path) as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"config {path}: invalid JSON ({e})") from e
        return cls.from_dict(payload)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_patients=self.n_patients,
            duration=self.duration_s,
            n_sensors=self.n_sensors,
            sample_rate=self.sample_rate_hz,
            spike_rate=self.spike_rate_per_min,
            spike_amplitude_snr=self.spike_amplitude_snr,
            focal_sigma=self.focal_sigma_m,
            seed=self.seed,
            helmet_radius=self.helmet_radius_m,
            amplitude_jitter=self.amplitude_jitter,
            width_jitter=self.width_jitter,
            max_foci=self.max_foci,
        )

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(self.bandpass_low_hz, self.bandpass_high_hz, self.target_rate_hz)

    def train_config(self, model_kind: Optional[str] = None, verbose: bool = False) -> TrainConfig:
        return TrainConfig(
            model_kind=model_kind or self.model_kinds[0],
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            dropout=self.dropout,
            seed=self.seed,
            verbose=verbose,
        )


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidArgumentError(f"config: {key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidArgumentError(f"config: {key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidArgumentError(f"config: {key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidArgumentError(f"config: {key} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise InvalidArgumentError(f"config: {key} must be a list of strings")
        return list(value)
    return value


class RunHistory:
    """Keeps the materialized config of every run next to its outputs"""

    HISTORY_FILE = "run_history.log"
    CURRENT_CONFIG_FILE = "run-config.json"

    CATEGORIES = {
        'Seed': ['seed'],
        'Synthetic Cohort': ['n_patients', 'duration_s', 'n_sensors', 'sample_rate_hz', 'spike_rate_per_min',
                             'spike_amplitude_snr', 'focal_sigma_m', 'helmet_radius_m', 'amplitude_jitter',
                             'width_jitter', 'max_foci'],
        'Preprocessing': ['bandpass_low_hz', 'bandpass_high_hz', 'target_rate_hz'],
        'Models & Training': ['model_kinds', 'lr', 'batch_size', 'max_epochs', 'patience', 'dropout'],
        'Cross-Validation': ['folds', 'repetitions', 'val_fraction'],
        'Paths': ['data_dir', 'out_dir', 'save_checkpoints'],
    }

    @staticmethod
    def save(config: RunConfig, command: str, out_dir: Path):
        """Write run-config.json and prepend a markdown entry to run_history.log"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        config_dict = config.to_dict()

        # run-config.json is byte-stable: no timestamp, so `--config run-config.json` reruns the run
        current_file = out_dir / RunHistory.CURRENT_CONFIG_FILE
        with open(current_file, 'w') as f:
            json.dump(config_dict, f, indent=2)
            f.write("\n")

        timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        history_entry = RunHistory._format_history_entry(timestamp, command, config_dict)
        history_file = out_dir / RunHistory.HISTORY_FILE
        try:
            existing_content = ""
            if history_file.exists():
                existing_content = history_file.read_text()

            with open(history_file, 'w') as f:
                f.write(history_entry)
                f.write("\n" + "=" * 80 + "\n\n")
                if existing_content:
                    f.write(existing_content)
        except OSError as e:
            print(f"{Colors.WARNING}⚠ Warning: Could not save run history: {e}{Colors.ENDC}")

    @staticmethod
    def _format_history_entry(timestamp: str, command: str, config_dict: Dict) -> str:
        """Format a configuration as a readable markdown entry"""
        lines = [
            f"# Run - {timestamp}",
            "",
            f"**Command:** {command}",
            f"**Timestamp:** {timestamp}",
            "",
            "## Configuration Parameters",
            "",
        ]

        for category, keys in RunHistory.CATEGORIES.items():
            category_items = []
            for key in keys:
                if key in config_dict:
                    value = config_dict[key]
                    if value == "":
                        value = "(empty)"
                    category_items.append(f"- **{key}**: `{value}`")
            if category_items:
                lines.append(f"### {category}")
                lines.extend(category_items)
                lines.append("")

        all_categorized_keys = set(k for keys in RunHistory.CATEGORIES.values() for k in keys)
        uncategorized = [f"- **{key}**: `{value}`" for key, value in config_dict.items()
                         if key not in all_categorized_keys]
        if uncategorized:
            lines.append("### Other")
            lines.extend(uncategorized)
            lines.append("")

        return "\n".join(lines)

    @staticmethod
    def load_previous(out_dir: Path) -> Optional[Dict]:
        """Load the most recent configuration from run-config.json"""
        current_file = Path(out_dir) / RunHistory.CURRENT_CONFIG_FILE
        if not current_file.exists():
            return None
        try:
            with open(current_file, 'r') as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            print(f"{Colors.WARNING}⚠ Warning: Could not load previous config: {e}{Colors.ENDC}")
            return None
