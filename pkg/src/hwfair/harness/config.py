"""Experiment configuration: TOML file <-> validated dataclass with a stable hash."""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .. import data, vhw
from ..errors import ConfigError
from ..models import ArchSpec
from ..train import TrainConfig

DATASET_KINDS = ("imbalance_margin", "synthetic", "csv")

# Deliberate departures from the reference experimental setup, copied into every manifest.
DEVIATION_NOTES = (
    "momentum defaults to 0.9 instead of 0.99; 0.99 destabilizes tiny logistic probes",
    "constant learning rate by default; linear_warmup_decay stands in for One-Cycle",
    "hardware is simulated by deterministic floating-point reduction plans",
    "boundary-distance penalty is computed per minibatch; absent groups are skipped",
)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "imbalance_margin"
    params: dict = field(default_factory=dict)
    train_fraction: float = 0.8
    split_seed: int = 0
    standardize: bool = False

    def build(self, base_dir: Path | None = None) -> data.GroupedDataset:
        p = dict(self.params)
        if self.kind == "imbalance_margin":
            sizes = tuple(p.pop("sizes", (600, 300, 100)))
            margins = tuple(p.pop("margins", (2.0, 2.0, 0.8)))
            spec = data.imbalance_margin_spec(sizes=sizes, margins=margins, **p)
            return data.gen_synthetic(spec)
        if self.kind == "synthetic":
            return data.gen_synthetic(data.SyntheticSpec.from_dict(p))
        path = Path(p["path"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        return data.load_csv(path, p.get("features"), p.get("group", "group"), p.get("label", "label"))

    def prepare(self, base_dir: Path | None = None):
        """(train, test) splits of the configured dataset."""
        ds = self.build(base_dir)
        train, test = data.split(ds, self.train_fraction, self.split_seed)
        if self.standardize:
            st = data.Standardizer.fit(train)
            train, test = st.apply(train), st.apply(test)
        return train, test

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, **self.params, "train_fraction": self.train_fraction,
            "split_seed": self.split_seed, "standardize": self.standardize,
        }


@dataclass(frozen=True)
class MitigationConfig:
    lambdas: tuple[float, ...] = (0.0, 1e-3, 1e-2, 1e-1)
    accuracy_budget: float = 0.02

    def to_dict(self) -> dict:
        return {"lambdas": list(self.lambdas), "accuracy_budget": self.accuracy_budget}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    model: ArchSpec
    train: TrainConfig
    profiles: vhw.ProfileRegistry
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    lambdas: tuple[float, ...] = (0.0,)
    mitigation: MitigationConfig = MitigationConfig()
    output: str = "hwfair_out"
    curvature: bool = True
    base_dir: str = "."

    def to_dict(self) -> dict:
        """Everything that determines results; the output location is excluded."""
        return {
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "mitigation_lambda" and k != "shuffle_seed"},
            "profiles": self.profiles.to_dict(),
            "sweep": {"seeds": list(self.seeds), "lambdas": list(self.lambdas), "curvature": self.curvature},
            "mitigation": self.mitigation.to_dict(),
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def train_config(self, seed: int, lam: float) -> TrainConfig:
        return self.train.replace(shuffle_seed=seed, mitigation_lambda=lam)

    def with_lambdas(self, lambdas) -> "ExperimentConfig":
        return _replace(self, lambdas=tuple(float(x) for x in lambdas))

    def with_output(self, output) -> "ExperimentConfig":
        return _replace(self, output=str(output))

    def to_toml(self) -> str:
        d = self.to_dict()
        d["output"] = {"dir": self.output}
        d["sweep"]["lambdas"] = [float(x) for x in d["sweep"]["lambdas"]]
        d["model"]["hidden"] = [list(h) for h in d["model"]["hidden"]]
        return tomli_w.dumps(d)


def _replace(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    fields = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    fields.update(kw)
    return ExperimentConfig(**fields)


def _floats(xs, what) -> tuple[float, ...]:
    try:
        out = tuple(float(x) for x in xs)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a list of numbers") from None
    if any(not math.isfinite(x) or x < 0 for x in out):
        raise ConfigError(f"{what} must be finite and >= 0")
    return out


def config_from_dict(d: dict, base_dir: str = ".") -> ExperimentConfig:
    """Validate a parsed config; every problem surfaces as ConfigError."""
    known = {"dataset", "model", "train", "profiles", "sweep", "mitigation", "output"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        ds_d = dict(d.get("dataset", {}))
        kind = ds_d.pop("kind", "imbalance_margin")
        if kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
        if kind == "csv" and "path" not in ds_d:
            raise ConfigError("csv datasets need dataset.path")
        dataset = DatasetConfig(
            kind,
            {k: v for k, v in ds_d.items() if k not in ("train_fraction", "split_seed", "standardize")},
            float(ds_d.get("train_fraction", 0.8)),
            int(ds_d.get("split_seed", 0)),
            bool(ds_d.get("standardize", False)),
        )
        if not 0.0 < dataset.train_fraction < 1.0:
            raise ConfigError("dataset.train_fraction must lie in (0, 1)")

        m = dict(d.get("model", {}))
        m.setdefault("input_dim", 2)
        model = ArchSpec.from_dict(m)

        t = dict(d.get("train", {}))
        for key in ("mitigation_lambda", "shuffle_seed"):
            if key in t:
                raise ConfigError(f"train.{key} is set by the sweep, not the train section")
        train = TrainConfig(**t)

        p = d.get("profiles", {"ids": vhw.builtin_profiles().ids})
        profiles = vhw.ProfileRegistry.from_dict(p)

        sweep = d.get("sweep", {})
        seeds = tuple(int(s) for s in sweep.get("seeds", (0, 1, 2, 3, 4)))
        if not seeds:
            raise ConfigError("sweep.seeds must list at least one seed")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("sweep.seeds must be distinct")
        lambdas = _floats(sweep.get("lambdas", (0.0,)), "sweep.lambdas")
        if not lambdas or len(set(lambdas)) != len(lambdas):
            raise ConfigError("sweep.lambdas must be a non-empty list of distinct values")

        mit = d.get("mitigation", {})
        mitigation = MitigationConfig(
            _floats(mit.get("lambdas", MitigationConfig.lambdas), "mitigation.lambdas"),
            float(mit.get("accuracy_budget", 0.02)),
        )
        if 0.0 not in mitigation.lambdas:
            raise ConfigError("mitigation.lambdas must include 0")
        if len(set(mitigation.lambdas)) != len(mitigation.lambdas):
            raise ConfigError("mitigation.lambdas must be distinct")
        output = str(d.get("output", {}).get("dir", "hwfair_out"))
        cfg = ExperimentConfig(
            dataset, model, train, profiles, seeds, lambdas, mitigation, output,
            bool(sweep.get("curvature", True)), base_dir,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    except Exception as exc:  # schema problems raised by the data / vhw layers
        raise ConfigError(f"{type(exc).__name__}: {exc}") from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(raw, str(path.parent.resolve()))
    return cfg


def default_config(output: str = "hwfair_out") -> ExperimentConfig:
    """The imbalance-margin benchmark with a logistic model and the builtin profiles."""
    return config_from_dict({
        "dataset": {"kind": "imbalance_margin", "seed": 0},
        "model": {"input_dim": 2, "hidden": [], "head": "sigmoid"},
        "train": {"epochs": 20, "batch_size": 64, "learning_rate": 0.1},
        "output": {"dir": output},
    })
