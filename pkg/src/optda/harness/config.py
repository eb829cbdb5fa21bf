"""Experiment configuration: a ``key = value`` text file plus flag overrides.

Lists are comma separated. Unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ..dynamics import BilinearSystem, lorenz96
from ..errors import ConfigurationError
from ..map_solver import SmoothConfig
from ..observation import (
    ObservationOperator,
    ObservationSetup,
    identity_operator,
    scenario_first3,
    scenario_half_blocks,
)

SECTION = "experiment"
SCENARIOS = ("half_blocks", "first3", "full")
HESSIAN_MODES = ("auto", "dense", "matfree")


@dataclass
class ExperimentConfig:
    d: int = 12
    f: float = 8.0
    h: float = 1e-2
    sigma_z: float = 1e-3
    k: int = 50
    k_list: tuple = (10, 20, 40, 60, 80, 100)
    T: float = 0.05
    sigma_list: tuple = (1e-5, 1e-4, 1e-3)
    h_list: tuple = (1e-3, 2e-3)
    scenario: str = "half_blocks"
    seed: int = 0
    trials: int = 20
    caps: tuple | None = None
    delta_min: float | None = None
    max_iters: int = 50
    taylor_order: int = 12
    step: float | None = None
    hessian: str = "auto"
    stride: int = 1
    n_obs: int | None = None
    out: str | None = None
    extra: dict = field(default_factory=dict, repr=False)

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigurationError(msg)

        need(self.d >= 1, "d must be positive")
        need(self.scenario in SCENARIOS, f"scenario must be one of {SCENARIOS}")
        if self.scenario == "half_blocks":
            need(self.d % 6 == 0, "half_blocks needs d divisible by 6")
        if self.scenario == "first3":
            need(self.d >= 4, "first3 needs d >= 4")
        need(self.d >= 4 or self.scenario == "full", "Lorenz 96 needs d >= 4")
        need(self.h > 0 and math.isfinite(self.h), "h must be positive")
        need(self.sigma_z >= 0, "sigma_z must be non-negative")
        need(self.k >= 1, "k must be at least 1")
        need(len(self.k_list) > 0 and all(k >= 1 for k in self.k_list), "k_list entries must be >= 1")
        need(self.T > 0, "T must be positive")
        need(all(s >= 0 for s in self.sigma_list), "sigma_list entries must be non-negative")
        need(all(h > 0 for h in self.h_list), "h_list entries must be positive")
        for h in self.h_list:
            need(abs(round(self.T / h) * h - self.T) <= 1e-9 * self.T, f"T={self.T} is not a multiple of h={h}")
        need(self.seed >= 0, "seed must be non-negative")
        need(self.trials >= 1, "trials must be at least 1")
        need(self.caps is None or all(c >= 0 for c in self.caps), "caps must be non-negative")
        need(self.delta_min is None or self.delta_min > 0, "delta_min must be positive")
        need(self.max_iters >= 1, "max_iters must be at least 1")
        need(1 <= self.taylor_order <= 30, "taylor_order must be in [1, 30]")
        need(self.step is None or self.step > 0, "step must be positive")
        need(self.hessian in HESSIAN_MODES, f"hessian must be one of {HESSIAN_MODES}")
        need(self.stride >= 1, "stride must be at least 1")
        need(self.n_obs is None or self.n_obs > self.k, "n_obs must exceed k")
        if self.step is not None:
            need(self.step * self.system().constants.C_der < 1, "step must be below 1 / C_der")
        return self

    def system(self) -> BilinearSystem:
        return lorenz96(self.d, self.f)

    def operator(self) -> ObservationOperator:
        if self.scenario == "half_blocks":
            return scenario_half_blocks(self.d)
        if self.scenario == "first3":
            return scenario_first3(self.d)
        return identity_operator(self.d)

    def setup(self, sigma_z: float | None = None, h: float | None = None, k: int | None = None) -> ObservationSetup:
        return ObservationSetup(self.operator(),
                                self.sigma_z if sigma_z is None else sigma_z,
                                self.h if h is None else h,
                                self.k if k is None else k)

    def smooth_config(self) -> SmoothConfig:
        return SmoothConfig(delta_min=self.delta_min, max_iters=self.max_iters,
                            hessian=None if self.hessian == "auto" else self.hessian,
                            caps=self.caps)

    def u0(self) -> np.ndarray:
        d = self.d
        return (d + 1 + np.arange(d)) / (2.0 * d)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw).validate()


def _parse_list(text: str, conv) -> tuple:
    return tuple(conv(x) for x in text.replace(" ", "").split(",") if x)


def _optional(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none", "auto") else conv(text)
    return parse


def _int(text: str) -> int:
    v = float(text)
    if v != int(v):
        raise ValueError(f"{text!r} is not an integer")
    return int(v)


PARSERS = {
    "d": _int,
    "f": float,
    "h": float,
    "sigma_z": float,
    "k": _int,
    "k_list": lambda s: _parse_list(s, _int),
    "T": float,
    "sigma_list": lambda s: _parse_list(s, float),
    "h_list": lambda s: _parse_list(s, float),
    "scenario": lambda s: s.strip().lower(),
    "seed": _int,
    "trials": _int,
    "caps": _optional(lambda s: _parse_list(s, _int)),
    "delta_min": _optional(float),
    "max_iters": _int,
    "taylor_order": _int,
    "step": _optional(float),
    "hessian": lambda s: s.strip().lower(),
    "stride": _int,
    "n_obs": _optional(_int),
    "out": _optional(str),
}


def parse_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``overrides`` (already typed) win."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(f"[{SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config: {exc}") from exc
    values = {}
    for key, raw in cp[SECTION].items():
        if key not in PARSERS:
            raise ConfigurationError(f"unknown config key {key!r}")
        try:
            values[key] = PARSERS[key](raw)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**values).validate()


def load(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    text = ""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, overrides)
