"""Flat ``key = value`` run configuration with environment overrides.

Blank lines and ``#`` comments are ignored.  Every key must be one of
:data:`KEYS`; anything else is a fatal :class:`ConfigError`.  After the
file is read, any environment variable ``RENDFIT_<KEY>`` (key upper-cased)
overrides the file value.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError
from ..fitter import FitConfig
from ..geometry import DatasetStats
from ..losses import LossWeights
from ..raster import RasterConfig
from ..synth import SYNTH_STATS

ENV_PREFIX = "RENDFIT_"


def _floats3(text):
    parts = text.replace(",", " ").split()
    if len(parts) != 3:
        raise ValueError("expected three numbers")
    return tuple(float(p) for p in parts)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # optimizer
    iterations: int = 150
    lr: float = 0.03
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    escape: bool = True
    escape_stride: int = 1
    escape_size: int = 64
    # loss weights
    lambda_p: float = 1.0
    lambda_b: float = 1.0
    lambda_m: float = 1.0
    lambda_d: float = 0.2
    lambda_dim: float = 0.1
    t_b: float = 0.1
    alpha_m: float = 0.1
    alpha_b: float = 0.03
    # renderer
    sigma: float = RasterConfig.sigma
    crop_h: int = 128
    crop_w: int = 128
    depth_temperature: float = RasterConfig.depth_temperature
    tau_b: float = 0.1
    coverage_gain: float = RasterConfig.coverage_gain
    cull_area: float = RasterConfig.cull_area
    # priors
    mu_z: float = SYNTH_STATS.mu_z
    sigma_z: float = SYNTH_STATS.sigma_z
    mu_d: tuple = SYNTH_STATS.mu_d
    sigma_d: tuple = SYNTH_STATS.sigma_d
    # detection filtering
    score_threshold: float = 0.1
    min_height: float = 20.0
    boundary_margin: float = 2.0
    object_class: str = "Car"
    mask_mode: str = "instance"
    # shape space
    generator: str = "decoder"
    decoder_seed: int = 0
    workers: int = 1

    def loss_weights(self):
        return LossWeights(self.lambda_p, self.lambda_b, self.lambda_m, self.lambda_d, self.lambda_dim,
                           self.t_b, self.alpha_m, self.alpha_b)

    def raster_config(self):
        return RasterConfig(sigma=self.sigma, crop_h=self.crop_h, crop_w=self.crop_w,
                            depth_temperature=self.depth_temperature, tau_b=self.tau_b,
                            coverage_gain=self.coverage_gain, cull_area=self.cull_area)

    def fit_config(self):
        return FitConfig(iterations=self.iterations, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                         escape=self.escape, escape_stride=self.escape_stride, escape_size=self.escape_size,
                         raster=self.raster_config())

    def stats(self):
        return DatasetStats(self.mu_z, self.sigma_z, tuple(self.mu_d), tuple(self.sigma_d))


_PARSERS = {
    int: int,
    float: float,
    bool: _bool,
    tuple: _floats3,
    str: str,
}
_SPECIAL = {
    "mask_mode": _choice("instance", "panoptic"),
    "generator": _choice("decoder", "cuboid", "frozen-random"),
}

KEYS = tuple(f.name for f in fields(RunConfig))


def _parser_for(name):
    if name in _SPECIAL:
        return _SPECIAL[name]
    default = getattr(RunConfig, name)
    return _PARSERS[type(default)]


def _apply(values, key, text, where):
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    try:
        values[key] = _parser_for(key)(text.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def parse_config(text, source="<config>", env=None):
    values = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{i}: expected key = value")
        key, val = line.split("=", 1)
        _apply(values, key.strip(), val, f"{source}:{i}")
    env = os.environ if env is None else env
    for name, val in sorted(env.items()):
        if name.startswith(ENV_PREFIX):
            _apply(values, name[len(ENV_PREFIX):].lower(), val, f"environment {name}")
    try:
        cfg = RunConfig(**values)
        cfg.loss_weights()
        cfg.fit_config()
        cfg.stats()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path=None, env=None):
    if path is None:
        return parse_config("", env=env)
    return parse_config(Path(path).read_text(), str(path), env)


def format_config(cfg):
    out = []
    for name in KEYS:
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = " ".join(repr(float(x)) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        out.append(f"{name} = {v}")
    return "\n".join(out) + "\n"
