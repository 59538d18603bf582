"""Flat pipeline configuration loaded from JSON or ``key = value`` text."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import BadSpec, InputError
from .io import SCHEMA_VERSION
from .merge import MergeConfig
from .morphology import MorphologyConfig
from .recon import ReconConfig

__all__ = ["Key", "KEYS", "PipelineConfig", "load_config"]


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit_open(v):
    return 0 < v <= 1


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    target: str  # recon | merge | morphology
    check: Callable = None
    choices: tuple = ()
    field: str = None  # attribute name on the target config when it differs


KEYS = {
    # reconstruction
    "ransac_threshold": Key(float, 0.02, "recon", _pos),
    "ransac_iters": Key(int, 200, "recon", _pos),
    "min_loop_inliers": Key(int, 100, "recon", _pos),
    "local_ba_min_shared": Key(int, 15, "recon", _pos),
    "local_ba_max_frames": Key(int, 10, "recon", lambda v: v >= 2),
    "local_ba_stride": Key(int, 5, "recon", _pos),
    "local_ba_iters": Key(int, 5, "recon", _nonneg),
    "pairwise_ba_iters": Key(int, 3, "recon", _nonneg),
    "global_ba_iters": Key(int, 30, "recon", _nonneg),
    "ba_function_tolerance": Key(float, 1e-6, "recon", _pos),
    "huber_px": Key(float, 1.0, "recon", _pos),
    "huber_depth": Key(float, 1.0, "recon", _pos),
    "literal_depth": Key(bool, True, "recon"),
    "use_loops": Key(bool, True, "recon"),
    # merge
    "lambda": Key(float, MergeConfig.lam, "merge", _nonneg, field="lam"),
    "lambda_s": Key(float, 1.0, "merge", _nonneg),
    "semantic_normalization": Key(str, "per-residual", "merge", choices=("per-residual", "per-object")),
    "semantic_huber": Key(float, 1.0, "merge", _pos),
    "t_s": Key(float, 0.05, "merge", _pos),
    "theta_max_deg": Key(float, 30.0, "merge", lambda v: 0 < v <= 90),
    "boundary_eps": Key(float, 0.02, "merge", _nonneg),
    "sba_iterations": Key(int, 30, "merge", _nonneg),
    "min_members": Key(int, 10, "merge", _pos),
    # morphology
    "alpha": Key(float, 0.8, "morphology", _pos),
    "min_component_fraction": Key(float, 0.01, "morphology", lambda v: 0 <= v <= 1),
    "bin_width": Key(float, 0.05, "morphology", _pos),
    "window": Key(float, 0.5, "morphology", _unit_open),
    "ground_clearance": Key(float, 0.05, "morphology", _nonneg),
    "pole_exclusion": Key(bool, False, "morphology"),
    "r_pole": Key(float, 0.05, "morphology", _pos),
    "pole_percentile": Key(float, 95.0, "morphology", lambda v: 0 <= v <= 100),
    "radius_mode": Key(str, "circumscribing", "morphology", choices=("circumscribing", "mean")),
    "max_points": Key(int, 20000, "morphology", lambda v: v >= 4),
}


def _coerce(name: str, key: Key, value):
    if key.type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise BadSpec(f"key {name!r} must be a boolean, got {value!r}")
    if key.type is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise BadSpec(f"key {name!r} must be an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise BadSpec(f"key {name!r} must be an integer, got {value!r}") from None
    if key.type is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise BadSpec(f"key {name!r} must be a number, got {value!r}") from None
    return str(value)


class PipelineConfig:
    """Every tunable of the pipeline as one flat document.

    Unknown keys and out-of-range values raise :class:`BadSpec` naming the key.
    """

    def __init__(self, seed: int = 0, **values):
        self.seed = int(seed)
        self.values = {k: v.default for k, v in KEYS.items()}
        for k, v in values.items():
            self.set(k, v)

    def set(self, name: str, value) -> None:
        if name == "seed":
            self.seed = _coerce(name, Key(int, 0, ""), value)
            return
        if name not in KEYS:
            raise BadSpec(f"unknown config key {name!r}")
        key = KEYS[name]
        v = _coerce(name, key, value)
        if key.choices and v not in key.choices:
            raise BadSpec(f"key {name!r} must be one of {key.choices}, got {v!r}")
        if key.check is not None and not key.check(v):
            raise BadSpec(f"key {name!r} out of range: {v!r}")
        self.values[name] = v

    def __getitem__(self, name):
        return self.seed if name == "seed" else self.values[name]

    def to_dict(self) -> dict:
        return {"seed": self.seed, **self.values}

    def _build(self, target, cls, **extra):
        kw = {(k.field or n): self.values[n] for n, k in KEYS.items() if k.target == target}
        return cls(seed=self.seed, **kw, **extra)

    def recon_config(self) -> ReconConfig:
        return self._build("recon", ReconConfig)

    def merge_config(self) -> MergeConfig:
        return self._build("merge", MergeConfig, recon=self.recon_config())

    def morphology_config(self) -> MorphologyConfig:
        return self._build("morphology", MorphologyConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d.pop("schema_version", None)
        return cls(**d)

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        d = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BadSpec(f"line {n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            d[k] = v
        return cls.from_dict(d)


def load_config(path) -> PipelineConfig:
    """Load a JSON document (with ``schema_version``) or a ``key = value`` file."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing file: {path}")
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise InputError(f"malformed JSON in {path}: {e}") from e
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise InputError(f"{path}: unsupported or missing schema_version")
        return PipelineConfig.from_dict(doc)
    return PipelineConfig.from_text(text)
