"""Run configuration, run-directory layout and the run manifest.

A run directory is self-contained: `runs/<stamp>/{run_config.json, dataset/,
checkpoints/, reports/, overlays/, run_manifest.json}`. The manifest snapshots
the config, hashes the inputs and records per-stage timestamps, which is
enough to re-execute the run and reproduce its outputs single-threaded.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .augment import AugmentConfig
from .dataset import ClassLabel, View, parse_label
from .explain import HotspotThresholds
from .model import ModelConfig, TrainConfig
from .synth import ClassCount, GeneratorSpec, default_corpus_spec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised when a run config file fails validation."""


@dataclass
class DataConfig:
    """Either an inline generator spec or a path to an existing manifest."""

    generator: GeneratorSpec | None = None
    manifest: str | None = None

    def validate(self) -> None:
        if (self.generator is None) == (self.manifest is None):
            raise ConfigError("data config needs exactly one of 'generator' or 'manifest'")
        if self.generator is not None:
            self.generator.validate()


@dataclass
class EvalConfig:
    test_fraction: float = 0.30
    n_repeats: int = 10
    init_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    base_seed: int = 0


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    data: DataConfig = field(default_factory=lambda: DataConfig(generator=default_corpus_spec()))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    explain: HotspotThresholds = field(default_factory=HotspotThresholds)
    threads: int = 1
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        d: dict = {
            "schema_version": self.schema_version,
            "model": asdict(self.model),
            "train": {
                "learning_rate": self.train.learning_rate,
                "batch_size": self.train.batch_size,
                "epochs": self.train.epochs,
                "augment": asdict(self.train.augment),
            },
            "evaluation": asdict(self.evaluation),
            "explain": asdict(self.explain),
            "threads": self.threads,
            "out_dir": self.out_dir,
        }
        if self.data.generator is not None:
            spec = self.data.generator
            d["data"] = {
                "generator": {
                    "counts": {
                        f"{view.value}/{label.value}": [cell.images, cell.stones]
                        for (view, label), cell in sorted(
                            spec.counts.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)
                        )
                    },
                    "seed": spec.seed,
                    "tip_probability": spec.tip_probability,
                }
            }
        else:
            d["data"] = {"manifest": self.data.manifest}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            version = d.get("schema_version", SCHEMA_VERSION)
            if version != SCHEMA_VERSION:
                raise ConfigError(f"unsupported config schema version: {version}")
            data_d = d.get("data", {})
            if "generator" in data_d and "manifest" in data_d:
                raise ConfigError("data config needs exactly one of 'generator' or 'manifest'")
            if "manifest" in data_d:
                data = DataConfig(manifest=str(data_d["manifest"]))
            else:
                gen_d = data_d.get("generator", {})
                if "counts" in gen_d:
                    counts = {}
                    for key, pair in gen_d["counts"].items():
                        view_token, label_token = key.split("/", 1)
                        counts[(View(view_token), parse_label(label_token))] = ClassCount(
                            int(pair[0]), int(pair[1])
                        )
                    spec = GeneratorSpec(
                        counts=counts,
                        seed=int(gen_d.get("seed", 0)),
                        tip_probability=float(gen_d.get("tip_probability", 0.05)),
                    )
                else:
                    spec = default_corpus_spec(
                        seed=int(gen_d.get("seed", 0)),
                        tip_probability=float(gen_d.get("tip_probability", 0.05)),
                    )
                data = DataConfig(generator=spec)
            train_d = d.get("train", {})
            cfg = cls(
                schema_version=version,
                data=data,
                model=ModelConfig(**d.get("model", {})),
                train=TrainConfig(
                    learning_rate=float(train_d.get("learning_rate", 0.001)),
                    batch_size=int(train_d.get("batch_size", 8)),
                    epochs=int(train_d.get("epochs", 100)),
                    augment=AugmentConfig(**train_d.get("augment", {})),
                ),
                evaluation=EvalConfig(**d.get("evaluation", {})),
                explain=HotspotThresholds(**d.get("explain", {})),
                threads=int(d.get("threads", 1)),
                out_dir=str(d.get("out_dir", "runs")),
            )
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid run config: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.train.augment.validate()
        if not 0.0 <= self.evaluation.test_fraction <= 1.0:
            raise ConfigError("test_fraction must lie in [0, 1]")
        if self.evaluation.n_repeats < 1:
            raise ConfigError("n_repeats must be >= 1")
        if not self.evaluation.init_seeds:
            raise ConfigError("init_seeds must not be empty")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(d)


def save_config(config: RunConfig, path: str | Path) -> None:
    write_atomic_text(path, json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def write_atomic_text(path: str | Path, text: str) -> None:
    write_atomic_bytes(path, text.encode())


def write_atomic_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Provenance record written atomically when a run stage completes."""

    config: dict
    input_hashes: dict[str, str] = field(default_factory=dict)
    stages: dict[str, dict[str, str]] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    def stage_started(self, name: str) -> None:
        self.stages.setdefault(name, {})["started_utc"] = utc_now_iso()

    def stage_finished(self, name: str) -> None:
        self.stages.setdefault(name, {})["finished_utc"] = utc_now_iso()

    def write(self, run_dir: str | Path) -> Path:
        path = Path(run_dir) / "run_manifest.json"
        existing: dict = {}
        if path.is_file():
            with open(path) as fh:
                existing = json.load(fh)
        merged = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "input_hashes": {**existing.get("input_hashes", {}), **self.input_hashes},
            "stages": {**existing.get("stages", {}), **self.stages},
            "artifacts": {**existing.get("artifacts", {}), **self.artifacts},
        }
        write_atomic_text(path, json.dumps(merged, indent=2, sort_keys=True) + "\n")
        return path


def prepare_run_dir(config: RunConfig, out_override: str | None = None) -> Path:
    """Create (or reuse) the run directory and drop the config snapshot."""
    if out_override is not None:
        run_dir = Path(out_override)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        run_dir = Path(config.out_dir) / stamp
    for sub in ("", "checkpoints", "reports", "overlays"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "run_config.json")
    return run_dir
