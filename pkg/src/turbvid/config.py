"""Run configuration: one JSON document covering the model, training,
simulator, oracle, and scene sections.

Every field has a default; unknown keys are rejected with their full path;
the fully resolved config is echoed into each run directory so a run can be
reproduced bit-identically from its output alone. All randomness derives
from the single seed through named sub-streams.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import LossWeights
from .model import ModelConfig
from .optim import TrainConfig
from .prompts import PROMPT_PAIRS
from .turbsim import TurbulenceParams


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    q: int = 1
    qc: int = 8
    k: int = 1
    max_disp: float = 3.0
    hidden_width: int = 32
    hidden_depth: int = 1
    grid_downscale: int = 1     # content grid is (H//ds) x (W//ds)
    deform_downscale: int = 4   # deformation grid, relative to the content grid


@dataclass
class TrainSection:
    iterations: int = 6000
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    frames_per_step: int = 4
    log_every: int = 10
    checkpoint_every: int = 0


@dataclass
class WeightsSection:
    mse: float = 1.0
    ssim: float = 0.2
    lpips: float = 0.5
    temp: float = 0.05
    text: float = 0.01


@dataclass
class TurbulenceSection:
    strength: float = 1.5
    smooth_sigma: float = 8.0
    temporal_corr: float = 0.7
    blur_sigma: float = 1.0


@dataclass
class OracleSection:
    command: str = ""        # empty = no oracle; CONVRT_ORACLE overrides
    timeout: float = 30.0
    prompt_index: int = 3    # 1-based row in the candidate prompt table


@dataclass
class SceneSection:
    frames: int = 16
    height: int = 64
    width: int = 64
    channels: int = 3
    kind: str = "static"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    turbulence: TurbulenceSection = field(default_factory=TurbulenceSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    scene: SceneSection = field(default_factory=SceneSection)

    # -- construction ----------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, path="")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON: {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def apply_override(self, dotted_key: str, raw_value: str):
        """Apply one --set section.key=value override (JSON-parsed value)."""
        parts = dotted_key.split(".")
        obj = self
        for part in parts[:-1]:
            if not dataclasses.is_dataclass(obj) or part not in _field_names(obj):
                raise ConfigError(f"unknown config section {dotted_key!r}")
            obj = getattr(obj, part)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(obj) or leaf not in _field_names(obj):
            raise ConfigError(f"unknown config key {dotted_key!r}")
        current = getattr(obj, leaf)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value  # bare strings allowed
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{dotted_key} expects a boolean")
        if isinstance(current, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted_key} expects a number, got {raw_value!r}")
        setattr(obj, leaf, type(current)(value) if not isinstance(value, str) else value)

    # -- derived objects --------------------------------------------------------

    def sub_seed(self, name: str) -> int:
        return int(np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
                   .generate_state(1)[0])

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.sub_seed(name))

    def model_config(self, t, h, w, c) -> ModelConfig:
        ds = max(1, self.model.grid_downscale)
        dds = max(1, self.model.deform_downscale)
        gh, gw = max(2, h // ds), max(2, w // ds)
        return ModelConfig(
            t=t, h=h, w=w, c=c, q=self.model.q, qc=self.model.qc, k=self.model.k,
            grid_h=gh, grid_w=gw,
            deform_grid_h=max(2, gh // dds), deform_grid_w=max(2, gw // dds),
            max_disp=self.model.max_disp, hidden_width=self.model.hidden_width,
            hidden_depth=self.model.hidden_depth)

    def loss_weights(self, ablate=()) -> LossWeights:
        w = WeightsSection(**dataclasses.asdict(self.weights))
        if "temp" in ablate:
            w.temp = 0.0
        if "text" in ablate:
            w.text = 0.0
        return LossWeights(mse=w.mse, ssim=w.ssim, lpips=w.lpips, temp=w.temp, text=w.text)

    def train_config(self, weights: LossWeights) -> TrainConfig:
        t = self.train
        return TrainConfig(iterations=t.iterations, learning_rate=t.learning_rate,
                           beta1=t.beta1, beta2=t.beta2, eps=t.eps,
                           frames_per_step=t.frames_per_step,
                           seed=self.sub_seed("model"), log_every=t.log_every,
                           checkpoint_every=t.checkpoint_every, weights=weights)

    def turbulence_params(self) -> TurbulenceParams:
        tb = self.turbulence
        return TurbulenceParams(strength=tb.strength, smooth_sigma=tb.smooth_sigma,
                                temporal_corr=tb.temporal_corr, blur_sigma=tb.blur_sigma,
                                seed=self.sub_seed("simulator"))

    def prompt_pair(self):
        idx = self.oracle.prompt_index
        if not 1 <= idx <= len(PROMPT_PAIRS):
            raise ConfigError(f"oracle.prompt_index must be 1..{len(PROMPT_PAIRS)}")
        return PROMPT_PAIRS[idx - 1]


def _field_names(obj):
    return {f.name for f in dataclasses.fields(obj)}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config keys{where}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{path}.{key}" if path else key)
        else:
            kwargs[key] = value
    return cls(**kwargs)
