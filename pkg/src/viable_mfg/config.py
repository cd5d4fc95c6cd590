"""JSON run configuration: schema validation and object builders.

Unknown keys are rejected everywhere.  Validation failures raise
ConfigInvalid carrying the offending field path and, when it can be located,
the line number in the source text.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigInvalid
from .geometry import DomainSpec, domain_from_config, signed_distance
from .hjb import HJBConfig
from .mfg import MFGConfig, MFGProblem
from .models import (
    DiffusionField,
    coupling_F_from_config,
    coupling_G_from_config,
    diffusion_from_config,
    divergence_drift,
    hamiltonian_from_config,
)
from .sde import SDEConfig

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_VEC = {"type": "array", "items": _NUM, "minItems": 1, "maxItems": 2}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj(
    {
        "T": _POS,
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "domain": _obj(
            {
                "kind": {"enum": ["interval", "box", "disk", "generalized_box"]},
                "bounds": {"type": "array", "items": {"anyOf": [_NUM, _VEC]}, "minItems": 1, "maxItems": 2},
                "center": _VEC,
                "delta0": _POS,
            },
            ["kind"],
        ),
        "diffusion": _obj(
            {"kind": {"enum": ["constant", "zero", "wright_fisher", "radial"]}, "scale": _NONNEG}, ["kind"]
        ),
        "hamiltonian": _obj(
            {
                "type": {"enum": ["quadratic", "example1", "example2", "inward"]},
                "M": _NONNEG,
                "control_radius": _POS,
                "eta": _POS,
                "q": {"type": "number", "exclusiveMinimum": 1},
                "c0": _NONNEG,
                "weight": _POS,
                "quadratic_guard": {"type": "boolean"},
            },
            ["type"],
        ),
        "coupling_F": _obj(
            {
                "mode": {"enum": ["local", "convolution"]},
                "kind": {"enum": ["zero", "constant", "linear", "saturating"]},
                "scale": _NUM,
                "value": _NUM,
                "width": _POS,
            }
        ),
        "coupling_G": _obj(
            {
                "mode": {"enum": ["local", "convolution"]},
                "kind": {"enum": ["zero", "constant", "affine", "cosine", "linear"]},
                "scale": _NUM,
                "value": _NUM,
                "slope": _VEC,
                "width": _POS,
                "relax_for_lipschitz_H": {"type": "boolean"},
            }
        ),
        "m0": _obj(
            {
                "kind": {"enum": ["uniform", "bump", "half"]},
                "center": _VEC,
                "width": _POS,
                "mass": _POS,
            },
            ["kind"],
        ),
        "dynamics": _obj(
            {
                "kind": {"enum": ["zero", "constant", "affine", "inward", "outward"]},
                "value": _VEC,
                "offset": _VEC,
                "matrix": {"type": "array", "items": _VEC},
                "M": _NONNEG,
            },
            ["kind"],
        ),
        "solver": _obj(
            {
                "h": _POS,
                "dt": _POS,
                "eps_penalty": _NONNEG,
                "shrink_eps": _NONNEG,
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "tol": _POS,
                "max_iters": {"type": "integer", "minimum": 1},
                "cfl_guard": {"type": "boolean"},
                "linear_solver": {"enum": ["direct", "bicgstab"]},
                "linear_tol": _POS,
                "invariance": {"enum": ["enforce", "warn", "skip"]},
                "invariance_delta": _POS,
            },
            ["h", "dt"],
        ),
        "sde": _obj(
            {
                "dt": _POS,
                "n_paths": {"type": "integer", "minimum": 1},
                "substep_limit": {"type": "integer", "minimum": 0, "maximum": 20},
                "drift_mode": {"enum": ["fixed", "feedback"]},
                "x0": _VEC,
                "n_samples": {"type": "integer", "minimum": 1},
                "C_expected": _NUM,
                "sweep_dt": {"type": "array", "items": _POS, "minItems": 1},
            }
        ),
        "invariance": _obj(
            {
                "condition": {"enum": ["hjb", "fp", "sde", "generalized"]},
                "delta": _POS,
                "C": {"anyOf": [{"const": "auto"}, _NONNEG]},
                "mode": {"enum": ["per_piece", "barrier"]},
            }
        ),
        "certify": _obj(
            {
                "gap_tol": _POS,
                "exit_tol": {"type": "number", "minimum": 0, "maximum": 1},
                "second_guess": {"enum": ["bump", "half"]},
            }
        ),
    },
    ["T", "domain"],
)


def _locate(text: str, key) -> int | None:
    if not isinstance(key, str):
        return None
    for i, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return i
    return None


def validate(data: dict, text: str = "") -> dict:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if not errors:
        return data
    err = errors[0]
    path = list(err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1]
        field = ".".join(str(p) for p in path + [missing])
        raise ConfigInvalid(f"missing required field {field!r}", field, _locate(text, path[-1]) if path else None)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        field = ".".join(str(p) for p in path + extra[:1])
        raise ConfigInvalid(f"unknown field {field!r}", field, _locate(text, extra[0] if extra else None))
    field = ".".join(str(p) for p in path) or "<root>"
    raise ConfigInvalid(f"invalid value for {field!r}: {err.message}", field,
                        _locate(text, path[-1] if path else None))


def load_config(path) -> tuple[dict, str]:
    """Parse and validate; returns (config, sha256 of the raw bytes)."""
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"malformed JSON: {exc.msg}", None, exc.lineno) from None
    if not isinstance(data, dict):
        raise ConfigInvalid("top level must be an object", "<root>", 1)
    validate(data, text)
    return data, hashlib.sha256(raw).hexdigest()


# ---------------------------------------------------------------------------
# builders


@dataclass
class Built:
    domain: DomainSpec
    a: DiffusionField
    cfg: dict

    @property
    def T(self) -> float:
        return float(self.cfg["T"])


def build(cfg: dict) -> Built:
    dom = domain_from_config(cfg["domain"])
    a = diffusion_from_config(cfg.get("diffusion", {"kind": "zero"}), dom)
    return Built(dom, a, cfg)


def hjb_config(cfg: dict) -> HJBConfig:
    s = cfg.get("solver", {})
    return HJBConfig(h=s["h"], dt=s["dt"], T=cfg["T"], eps_penalty=s.get("eps_penalty", 0.0),
                     shrink_eps=s.get("shrink_eps", 0.0), cfl_guard=s.get("cfl_guard", True),
                     linear_solver=s.get("linear_solver", "direct"), tol=s.get("linear_tol", 1e-12))


def mfg_config(cfg: dict) -> MFGConfig:
    s = dict(cfg.get("solver", {}))
    keys = set(MFGConfig.__dataclass_fields__)
    return MFGConfig(**{k: v for k, v in s.items() if k in keys})


def sde_config(cfg: dict, dt: float | None = None) -> SDEConfig:
    s = cfg.get("sde", {})
    return SDEConfig(dt=dt if dt is not None else s.get("dt", 1e-3), n_paths=s.get("n_paths", 1000),
                     seed=cfg.get("seed", 0), substep_limit=s.get("substep_limit", 4),
                     drift_mode=s.get("drift_mode", "fixed"), n_samples=s.get("n_samples", 50))


def initial_density_fn(block: dict | None, domain: DomainSpec):
    """m0(x) from the config; ``mass`` rescales the unit-mass shape on the grid later."""
    block = block or {"kind": "uniform"}
    kind = block["kind"]
    lo, hi = domain.bounding_box
    if kind == "uniform":
        return lambda x: np.ones(len(x))
    if kind == "bump":
        c = np.asarray(block.get("center", (lo + (hi - lo) / 4).tolist()), dtype=float)
        w = float(block.get("width", 0.1 * float(np.min(hi - lo))))
        return lambda x: np.exp(-np.sum((x - c) ** 2, axis=1) / (2 * w * w))
    if kind == "half":
        mid = float((lo[0] + hi[0]) / 2)
        return lambda x: (x[:, 0] < mid).astype(float)
    raise ConfigInvalid(f"unknown m0 kind {kind!r}", "m0.kind")


def normalized_density(block: dict | None, domain: DomainSpec, mesh):
    """m0 as a callable scaled to the configured mass on ``mesh``.

    A callable (rather than cell values) lets refined re-solves evaluate the
    same profile on finer grids.
    """
    shape = initial_density_fn(block, domain)
    mass = (block or {}).get("mass", 1.0)
    total = shape(mesh.centers).sum() * mesh.cell_volume
    if total <= 0:
        raise ConfigInvalid("m0 has no mass on the grid", "m0")
    scale = mass / total
    return lambda x: scale * shape(x)


def velocity_fn(block: dict | None, domain: DomainSpec):
    """State velocity v(t, x) of the uncontrolled dynamics dX = v dt + sqrt(2) sigma dB."""
    block = block or {"kind": "zero"}
    kind = block["kind"]
    dim = domain.dim
    if kind == "zero":
        return lambda t, x: np.zeros_like(x)
    if kind == "constant":
        v = np.asarray(block.get("value", [0.0] * dim), dtype=float)
        return lambda t, x: np.broadcast_to(v, x.shape).copy()
    if kind == "affine":
        c = np.asarray(block.get("offset", [0.0] * dim), dtype=float)
        A = np.asarray(block.get("matrix", np.zeros((dim, dim)).tolist()), dtype=float)
        return lambda t, x: c + x @ A.T
    if kind in ("inward", "outward"):
        M = float(block.get("M", 1.0)) * (1 if kind == "inward" else -1)
        return lambda t, x: M * signed_distance(domain, x)[1]
    raise ConfigInvalid(f"unknown dynamics kind {kind!r}", "dynamics.kind")


def fp_drift_fn(block: dict | None, built: Built):
    """Divergence-form FP drift beta = -v + b~ for the configured dynamics."""
    v = velocity_fn(block, built.domain)
    return lambda t, x: -v(t, x) + divergence_drift(built.a, x)


def mfg_problem(cfg: dict, built: Built | None = None) -> MFGProblem:
    built = built or build(cfg)
    model = hamiltonian_from_config(cfg.get("hamiltonian", {"type": "quadratic"}), built.domain)
    F = coupling_F_from_config(cfg.get("coupling_F"))
    G = coupling_G_from_config(cfg.get("coupling_G"))
    mesh = hjb_config(cfg).mesh(built.domain)
    m0 = normalized_density(cfg.get("m0"), built.domain, mesh)
    return MFGProblem(built.domain, built.a, model, F, G, m0, float(cfg["T"]))
