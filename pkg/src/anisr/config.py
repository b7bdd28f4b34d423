"""Run configuration: a YAML tree with flat dotted overrides.

A stored RunConfig plus a checkpoint reproduces a run deterministically; the
CLI accepts ``--set a.b=c`` overrides whose values are parsed as YAML
scalars.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .diffusion import SamplerConfig, VariantConfig
from .schedule import make_schedule
from .unet import NetConfig
from .volume import PLANES, AcquisitionSpec


class ConfigError(ValueError):
    pass


def cache_dir() -> Path:
    """Scratch directory, overridable via ANISR_CACHE."""
    root = os.environ.get("ANISR_CACHE")
    if root:
        return Path(root)
    return Path.home() / ".cache" / "anisr"


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    cosine_s: float = 0.008

    def build(self):
        return make_schedule(self.kind, self.T, self.beta_start,
                             self.beta_end, self.cosine_s)


@dataclass
class AcquisitionConfig:
    thickness: float = 3.0
    gap: float = 1.0
    axis: str | int = "axial"
    profile: str = "slr"
    spacing: float = 1.0

    def axis_index(self, orientation=PLANES) -> int:
        if isinstance(self.axis, int):
            if self.axis not in (0, 1, 2):
                raise ConfigError(f"axis index must be 0..2, got {self.axis}")
            return self.axis
        if self.axis not in orientation:
            raise ConfigError(
                f"axis {self.axis!r} not found in volume orientation {orientation}")
        return orientation.index(self.axis)

    def build_spec(self, orientation=PLANES) -> AcquisitionSpec:
        return AcquisitionSpec(thickness=self.thickness, gap=self.gap,
                               through_plane_axis=self.axis_index(orientation),
                               in_plane_spacing=self.spacing)


@dataclass
class DataConfig:
    kind: str = "synthetic"
    # synthetic corpus
    n_slices: int = 600
    size: int = 64
    holdout: int = 48
    seed: int = 123
    # manifest-backed corpus
    manifest: str | None = None
    contrasts: tuple = ("T1w", "T2w")
    min_nonzero_frac: float = 0.01


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    ema_decay: float = 0.999
    val_every: int = 1000
    val_items: int = 4
    val_sampler_steps: int = 50
    checkpoint_every: int = 1000
    grad_clip: float = 1.0


@dataclass
class VariantSettings:
    name: str = "AniRes2D"
    tau_max: float = 0.5
    nca_at_inference: bool = False

    def build(self) -> VariantConfig:
        return VariantConfig.from_name(self.name, self.tau_max, self.nca_at_inference)


@dataclass
class SamplerSettings:
    kind: str = "ddim"
    steps: int = 50
    eta: float = 0.0
    seed: int = 0

    def build(self) -> SamplerConfig:
        return SamplerConfig(kind=self.kind, steps=self.steps,
                             eta=self.eta, seed=self.seed)


@dataclass
class RunConfig:
    variant: VariantSettings = field(default_factory=VariantSettings)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    net: dict = field(default_factory=lambda: {"preset": "default"})
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: str = "none"
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    output_dir: str = "runs/run"

    def build_net_config(self) -> NetConfig:
        net = dict(self.net)
        preset = net.pop("preset", None)
        if preset == "tiny":
            base = NetConfig.tiny()
        elif preset in (None, "default"):
            base = NetConfig()
        else:
            raise ConfigError(f"unknown net preset {preset!r}")
        known = {f.name for f in fields(NetConfig)}
        unknown = set(net) - known
        if unknown:
            raise ConfigError(f"unknown net config keys {sorted(unknown)}")
        d = base.to_dict()
        d.update(net)
        return NetConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["contrasts"] = list(self.data.contrasts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            sections = {
                "variant": VariantSettings, "schedule": ScheduleConfig,
                "sampler": SamplerSettings, "acquisition": AcquisitionConfig,
                "data": DataConfig, "train": TrainConfig,
            }
            kwargs = {}
            for key, klass in sections.items():
                if key in d:
                    sub = dict(d.pop(key))
                    if key == "data" and "contrasts" in sub:
                        sub["contrasts"] = tuple(sub["contrasts"])
                    known = {f.name for f in fields(klass)}
                    unknown = set(sub) - known
                    if unknown:
                        raise ConfigError(
                            f"unknown keys in '{key}': {sorted(unknown)}")
                    kwargs[key] = klass(**sub)
            known = {f.name for f in fields(cls)}
            unknown = set(d) - known
            if unknown:
                raise ConfigError(f"unknown config keys {sorted(unknown)}")
            return cls(**kwargs, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        return cls.from_dict(raw)


def apply_overrides(config: RunConfig, assignments) -> RunConfig:
    """Apply ``a.b=c`` assignments on top of a RunConfig."""
    tree = config.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form a.b=value")
        dotted, _, raw_value = item.partition("=")
        keys = dotted.strip().split(".")
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw_value!r}: {exc}") from exc
        node = tree
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[key]
        if keys[-1] not in node and keys[0] != "net":
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = value
    return RunConfig.from_dict(tree)


def preset_tiny() -> RunConfig:
    """Desk-scale preset: tiny net on the synthetic phantom corpus."""
    return RunConfig(
        net={"preset": "tiny"},
        data=DataConfig(kind="synthetic", n_slices=600, size=64, holdout=48),
        train=TrainConfig(steps=2000, batch_size=16, lr=2e-4, ema_decay=0.999,
                          val_every=1000, val_items=4, checkpoint_every=1000),
        augment="none",
    )


def preset_default() -> RunConfig:
    return RunConfig(
        train=TrainConfig(steps=500_000, batch_size=8, lr=1e-4, ema_decay=0.9999,
                          val_every=5000, val_items=8, checkpoint_every=5000),
        augment="full",
    )


PRESETS = {"tiny": preset_tiny, "default": preset_default}
