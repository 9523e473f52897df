"""Run configuration: one JSON file aggregating every typed config, with
dotted `key=value` overrides."""

__all__ = [
    "PreprocessConfig",
    "DatasetConfig",
    "InferenceConfig",
    "MetricsConfig",
    "RunConfig",
    "load_config",
    "save_config",
    "apply_overrides",
]

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from enum import Enum

from fastcore.xtras import Path

from .errors import ConfigError
from .mirror_net import BranchConfig
from .sampler import AugmentConfig
from .train import Stage, TrainConfig
from .volumes import PhantomConfig


@dataclass
class PreprocessConfig:
    hu_threshold: float = -500.0
    margin_vox: int = 2

    def __post_init__(self):
        if self.margin_vox < 0:
            raise ConfigError(f"margin_vox must be >= 0, got {self.margin_vox}")


@dataclass
class DatasetConfig:
    "Phantom counts per split; lesion-free studies are generated on top and evaluated with validation"
    n_train: int = 40
    n_val: int = 10
    n_test: int = 10
    n_lesion_free: int = 2

    def __post_init__(self):
        for k in ("n_train", "n_val", "n_test", "n_lesion_free"):
            if getattr(self, k) < 0:
                raise ConfigError(f"DatasetConfig.{k} must be >= 0, got {getattr(self, k)}")
        if self.n_train < 1:
            raise ConfigError("at least one training study is required")


@dataclass
class InferenceConfig:
    patch_size: int = 32
    sigma_scale: float = 0.125
    threshold: float = 0.5
    tta: bool = True
    tta_mode: str = "all"
    batch_size: int = 2

    def __post_init__(self):
        if self.patch_size < 2 or self.sigma_scale <= 0 or self.batch_size < 1:
            raise ConfigError(
                f"inference needs patch_size >= 2, sigma_scale > 0, batch_size >= 1; "
                f"got {self.patch_size}, {self.sigma_scale}, {self.batch_size}"
            )
        if not 0 <= self.threshold <= 1:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.tta_mode not in ("all", "single"):
            raise ConfigError(f"tta_mode must be 'all' or 'single', got {self.tta_mode!r}")


@dataclass
class MetricsConfig:
    connectivity: int = 26

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ConfigError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")


def _ct_branch():
    return BranchConfig(out_channels=PhantomConfig().tissue_class_count)


@dataclass
class RunConfig:
    data_dir: str = "data"
    output_dir: str = "runs/default"
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    ct_branch: BranchConfig = field(default_factory=_ct_branch)
    pet_branch: BranchConfig = field(default_factory=BranchConfig)
    train_ct: TrainConfig = field(default_factory=lambda: TrainConfig(Stage.CT, n_epoch=20, lr=0.01))
    train_pet: TrainConfig = field(default_factory=lambda: TrainConfig(Stage.PET, n_epoch=40, lr=0.004))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    lesion_studies_only: bool = True
    final_fit: bool = False
    report_ablation: bool = True

    def __post_init__(self):
        if self.ct_branch.out_channels != self.phantom.tissue_class_count:
            raise ConfigError(
                f"ct_branch.out_channels ({self.ct_branch.out_channels}) must equal "
                f"phantom.tissue_class_count ({self.phantom.tissue_class_count})"
            )
        if self.pet_branch.out_channels != 1:
            raise ConfigError("pet_branch.out_channels must be 1")
        if self.ct_branch.levels != self.pet_branch.levels:
            raise ConfigError("ct_branch and pet_branch need the same number of levels")
        f = 2**self.ct_branch.levels
        for name, p in (("train_ct", self.train_ct.patch_size), ("train_pet", self.train_pet.patch_size), ("inference", self.inference.patch_size)):
            if p % f:
                raise ConfigError(f"{name}.patch_size {p} must be divisible by 2**levels = {f}")
        if self.train_ct.stage is not Stage.CT or self.train_pet.stage is not Stage.PET:
            raise ConfigError("train_ct must use stage 'ct' and train_pet stage 'pet'")

    def to_dict(self):
        return _to_plain(dataclasses.asdict(self))

    def config_hash(self):
        "Short digest of the canonical JSON form"
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def data_path(self):
        return Path(self.data_dir)

    @property
    def output_path(self):
        return Path(self.output_dir)


def _to_plain(o):
    if isinstance(o, Enum):
        return o.value
    if isinstance(o, dict):
        return {k: _to_plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_to_plain(v) for v in o]
    return o


def _from_dict(cls, d, where="config"):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for k, v in d.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            v = _from_dict(t, v, f"{where}.{k}")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(fname=None, overrides=None):
    "Read a `RunConfig` from JSON (defaults when `fname` is None) and apply `key=value` overrides"
    d = RunConfig().to_dict()
    if fname is not None:
        fname = Path(fname)
        if not fname.exists():
            raise ConfigError(f"config file {fname} not found")
        try:
            loaded = json.loads(fname.read_text())
        except ValueError as e:
            raise ConfigError(f"{fname}: invalid JSON ({e})") from e
        d = _merge(d, loaded)
    d = apply_overrides(d, overrides or [])
    return _from_dict(RunConfig, d)


def _merge(base, new):
    res = dict(base)
    for k, v in new.items():
        res[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return res


def save_config(cfg: RunConfig, fname):
    fname = Path(fname)
    fname.parent.mkdir(parents=True, exist_ok=True)
    fname.write_text(json.dumps(cfg.to_dict(), indent=2))
    return fname


def apply_overrides(d, overrides):
    "Apply `a.b.c=value` strings to the nested dict `d`; values parse as JSON, else stay strings"
    d = json.loads(json.dumps(d))
    for o in overrides:
        if "=" not in o:
            raise ConfigError(f"override {o!r} is not of the form key=value")
        key, raw = o.split("=", 1)
        try:
            val = json.loads(raw)
        except ValueError:
            val = raw
        *parents, leaf = key.strip().split(".")
        node = d
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a config section")
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"override {key!r}: unknown key {leaf!r}")
        node[leaf] = val
    return d
