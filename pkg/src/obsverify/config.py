"""Run configuration: schema, TOML/JSON loading, resolved snapshots.

One structured file drives every subcommand.  Unknown keys are
rejected; every run writes back the fully resolved configuration plus
its hash so artifacts are reproducible from the snapshot alone.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .boxes import Box, BoxUnion
from .ltlf import parse as parse_hyper
from .properties import (CURRENT_DETECT, CURRENT_OPACITY, CUSTOM,
                         INITIAL_DETECT, INITIAL_OPACITY, PropertySpec)
from .system import (GaussianDiag, Poss, TruncatedGaussian, UniformBox)


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "seed": int,
    "system": {
        "state_dim": int,
        "output_dim": int,
        "disturbance_dim": int,
        "dynamics": list,
        "output": list,
        "domain": dict,        # {lo: [...], hi: [...]}
        "initial": dict,       # {lo, hi} or {boxes: [{lo, hi}, ...]}
        "horizon": int,
        "disturbance": dict,   # {kind, mean, std, box, sigmas}
        "truncation_sigmas": float,
    },
    "property": {
        "kind": str,
        "p": float,
        "eps": float,
        "lam": float,
        "secret": dict,
        "formula": str,
    },
    "discretization": {
        "dp_resolution": int,
        "w1_quadrature": int,
        "w2_candidates": int,
        "estimate_cells": int,
        "estimate_w_points": int,
        "validate_per_dim": int,
        "validate_inner": str,        # quadrature | mc
        "validate_mc_samples": int,
        "x0_scan": int,
        "tolerance": float,
        "acceptance": str,            # trailing | literal
    },
    "estimate": {
        "method": str,                # grid | sampled
        "samples": int,
        "companions": int,
        "x0_scan": int,
    },
    "training": {
        "epochs": int,
        "dataset_size": int,
        "batch_size": int,
        "lr": float,
        "lr_final": float,
        "momentum": float,
        "lambda_term": float,
        "lambda_rec": float,
        "lambda_beta": float,
        "n_adversary": int,
        "m_inner": int,
        "beta_init": float,
        "hidden": list,
        "traj_fraction": float,
        "target_p": float,
        "eval_every": int,
        "eval_per_dim": int,
        "early_stop": bool,
        "warm_start": bool,
    },
    "output": {
        "directory": str,
    },
}

_DEFAULTS = {
    "seed": 0,
    "system": {"truncation_sigmas": 3.0},
    "property": {},
    "discretization": {
        "dp_resolution": 241,
        "w1_quadrature": 9,
        "w2_candidates": 21,
        "estimate_cells": 201,
        "estimate_w_points": 9,
        "validate_per_dim": 50,
        "validate_inner": "quadrature",
        "validate_mc_samples": 30,
        "x0_scan": 201,
        "tolerance": 1e-6,
        "acceptance": "trailing",
    },
    "estimate": {"method": "grid", "samples": 10000, "companions": 256,
                 "x0_scan": 9},
    "training": {
        "epochs": 2000, "dataset_size": 100_000, "batch_size": 256,
        "lr": 1e-3, "lr_final": 1e-5, "momentum": 0.9,
        "lambda_term": 1.5, "lambda_rec": 1.0, "lambda_beta": 2.5,
        "n_adversary": 30, "m_inner": 16, "beta_init": 0.0,
        "hidden": [64, 64, 32], "traj_fraction": 0.7, "target_p": 0.0,
        "eval_every": 100, "eval_per_dim": 15, "early_stop": True,
        "warm_start": False,
    },
    "output": {"directory": "out"},
}


def _check_keys(data: dict, schema: dict, path: str = "") -> None:
    for key, val in data.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path}{key!r}")
        want = schema[key]
        if isinstance(want, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path}{key!r} must be a table")
            if key in ("domain", "initial", "secret", "disturbance"):
                continue  # free-form leaf tables validated on build
            _check_keys(val, want, f"{path}{key}.")
        elif want is float:
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"config key {path}{key!r} must be a number")
        elif want is int:
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"config key {path}{key!r} must be an integer")
        elif not isinstance(val, want):
            raise ConfigError(f"config key {path}{key!r} must be {want.__name__}")


def _merge(defaults: dict, data: dict) -> dict:
    out = {}
    for key, dval in defaults.items():
        if isinstance(dval, dict):
            out[key] = _merge(dval, data.get(key, {}))
        else:
            out[key] = data.get(key, dval)
    for key, val in data.items():
        if key not in out:
            out[key] = val
    return out


@dataclass
class RunConfig:
    raw: dict
    path: str | None = None

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]

    # -- builders ---------------------------------------------------------

    def build_model(self) -> Poss:
        sysc = self.raw.get("system")
        if not sysc or "dynamics" not in sysc:
            raise ConfigError("config needs a [system] section with dynamics")
        dist = _build_distribution(sysc.get("disturbance"))
        try:
            return Poss.make(
                dynamics=list(sysc["dynamics"]),
                output=list(sysc["output"]),
                domain=_box_pair(sysc["domain"], "system.domain"),
                initial=_region(sysc["initial"], "system.initial"),
                disturbance=dist,
                horizon=int(sysc["horizon"]),
                truncation_sigmas=float(sysc.get("truncation_sigmas", 3.0)),
            )
        except KeyError as e:
            raise ConfigError(f"missing system key {e.args[0]!r}") from None

    def build_property(self) -> PropertySpec:
        prop = self.raw.get("property")
        if not prop or "kind" not in prop:
            raise ConfigError("config needs a [property] section with a kind")
        kind = prop["kind"]
        secret = _region(prop["secret"], "property.secret") if "secret" in prop else None
        formula = parse_hyper(prop["formula"]) if "formula" in prop else None
        try:
            return PropertySpec(kind=kind, p=float(prop["p"]),
                                eps=prop.get("eps"), lam=prop.get("lam"),
                                secret=secret, formula=formula)
        except KeyError as e:
            raise ConfigError(f"missing property key {e.args[0]!r}") from None

    def section(self, name: str) -> dict:
        return self.raw[name]


def _box_pair(d: dict, where: str) -> Box:
    try:
        return Box.make(d["lo"], d["hi"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad box at {where}: {e}") from None


def _region(d: dict, where: str) -> BoxUnion:
    if "boxes" in d:
        return BoxUnion.make([(b["lo"], b["hi"]) for b in d["boxes"]])
    return BoxUnion((_box_pair(d, where),))


def _build_distribution(d: dict | None):
    if not d or "kind" not in d:
        raise ConfigError("system.disturbance needs a 'kind'")
    kind = d["kind"]
    if kind == "gaussian":
        return GaussianDiag(tuple(map(float, d["mean"])),
                            tuple(map(float, d["std"])))
    if kind == "uniform":
        return UniformBox(Box.make(d["lo"], d["hi"]))
    if kind == "truncated_gaussian":
        return TruncatedGaussian(tuple(map(float, d["mean"])),
                                 tuple(map(float, d["std"])),
                                 float(d.get("sigmas", 3.0)))
    raise ConfigError(f"unknown disturbance kind {kind!r}")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_bytes()
    if path.suffix == ".json":
        data = json.loads(text)
    else:
        try:
            data = tomli.loads(text.decode())
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"bad TOML in {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    _check_keys(data, _SCHEMA)
    merged = _merge(_DEFAULTS, data)
    return RunConfig(raw=merged, path=str(path))


def write_snapshot(cfg: RunConfig, outdir: Path) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    snap = {"config": cfg.raw, "config_hash": cfg.config_hash()}
    path = outdir / "resolved_config.json"
    path.write_text(json.dumps(snap, indent=2, sort_keys=True))
    return path
