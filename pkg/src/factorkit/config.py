"""Experiment configuration and its flat key/value file format.

A config file is INI-style. Base settings live in ``[experiment]``; ablation
grids add one ``[ablation.rowN]`` section per row holding a ``name`` and any
overrides of the base settings::

    [experiment]
    alpha = 0.005
    delta = 0.005

    [ablation.row1]
    name = Ours (without class_rec)
    mode = ifcvae
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .models import ArchSpec

MODES = ("ifcvae", "naive")


@dataclass(frozen=True)
class ExperimentConfig:
    # loss coefficients
    alpha: float = 0.005
    beta: float = 0.0
    rho: float = 0.1
    delta: float = 0.005
    mode: str = "ifcvae"
    kl_reduction: str = "mean"
    use_class_rec: bool = True
    encoder_gan: bool = True
    # optimization
    learning_rate: float = 2e-4
    momentum: float = 0.5
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    aux_steps: int = 1
    aux_lr_scale: float = 1.0
    aux_replay: int = 1
    kl_warmup: int = 0
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 5
    # architecture
    d_z: int = 16
    width: int = 16
    residual: bool = False
    share_trunk: bool = True
    aux_hidden: int = 64
    name: str = field(default="", compare=False)

    def __post_init__(self):
        for k in ("alpha", "beta", "rho", "delta"):
            v = getattr(self, k)
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"{k} must be finite and >= 0, got {v}")
        if self.kl_reduction not in ("sum", "mean"):
            raise ConfigurationError(f"kl_reduction must be 'sum' or 'mean', got {self.kl_reduction!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigurationError("learning_rate must be finite and >= 0")
        if not self.aux_lr_scale > 0 or not math.isfinite(self.aux_lr_scale):
            raise ConfigurationError("aux_lr_scale must be finite and > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if not 0 <= self.rms_decay < 1:
            raise ConfigurationError("rms_decay must lie in [0, 1)")
        if (self.epochs < 0 or self.batch_size < 1 or self.aux_steps < 1 or self.aux_replay < 1
                or self.checkpoint_every < 1 or self.kl_warmup < 0):
            raise ConfigurationError(
                "epochs >= 0, batch_size >= 1, aux_steps >= 1, aux_replay >= 1, checkpoint_every >= 1, kl_warmup >= 0 required"
            )

    def alpha_at(self, epoch: int) -> float:
        """KL coefficient in effect during ``epoch`` (0-based): linear ramp over ``kl_warmup`` epochs."""
        if self.kl_warmup == 0:
            return self.alpha
        return self.alpha * min(1.0, (epoch + 1) / self.kl_warmup)

    def arch(self, image_size: int, channels: int) -> ArchSpec:
        return ArchSpec(
            image_size=image_size,
            channels=channels,
            d_z=self.d_z,
            width=self.width,
            residual=self.residual,
            share_trunk=self.share_trunk,
            aux_hidden=self.aux_hidden,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("name")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**coerce(d))


# coefficient presets of the two shipped ablation grids
TABLE1 = dict(rho=0.1, delta=0.1, alpha=0.2, beta=0.0)
TABLE3 = dict(rho=0.1, delta=0.005, alpha=0.005, beta=0.0, momentum=0.5)

_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def coerce(d: dict) -> dict:
    out = {}
    for key, value in d.items():
        if key not in _TYPES:
            raise ConfigurationError(f"unknown config key {key!r}")
        kind = _TYPES[key]
        try:
            if kind == "bool":
                value = _BOOL[str(value).strip().lower()] if not isinstance(value, bool) else value
            elif kind == "int":
                value = int(value)
            elif kind == "float":
                value = float(value)
            else:
                value = str(value)
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"bad value for {key}: {value!r}") from exc
        out[key] = value
    return out


def _parser():
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str
    return p


def read_config(path) -> tuple[ExperimentConfig, list[ExperimentConfig]]:
    """Return the base config and the (possibly empty) list of ablation rows."""
    path = Path(path)
    p = _parser()
    try:
        with open(path) as fh:
            p.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    unknown = [s for s in p.sections() if s != "experiment" and not s.startswith("ablation.")]
    if unknown:
        raise ConfigurationError(f"unknown sections {unknown}")
    base_items = dict(p["experiment"]) if p.has_section("experiment") else {}
    base = ExperimentConfig.from_dict(base_items)
    rows = []
    row_sections = [s for s in p.sections() if s.startswith("ablation.")]
    row_sections.sort(key=lambda s: (len(s), s))
    for section in row_sections:
        items = {**base_items, **dict(p[section])}
        items.setdefault("name", section.split(".", 1)[1])
        rows.append(ExperimentConfig.from_dict(items))
    return base, rows


def write_config(path, base: ExperimentConfig, rows=()) -> Path:
    p = _parser()
    default = ExperimentConfig().to_dict()
    p["experiment"] = {k: str(v) for k, v in base.to_dict().items() if k != "name"}
    base_d = base.to_dict()
    for i, row in enumerate(rows, 1):
        d = row.to_dict()
        p[f"ablation.row{i}"] = {
            k: str(v) for k, v in d.items() if k == "name" or v != base_d.get(k, default.get(k))
        }
    with open(path, "w") as fh:
        p.write(fh)
    return Path(path)
