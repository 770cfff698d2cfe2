"""Scenario files: YAML documents describing initial conditions and a run."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..metric import METRIC_KINDS
from ..particles import ParticleTable, create_table
from ..sph import ForceConfig, SPHPipeline

__all__ = ["Scenario", "ScenarioError", "DEFAULTS", "load_scenario", "parse_scenario", "dump_scenario", "build_table"]

GENERATORS = ("lattice", "gaussian_cloud", "two_body", "file")

DEFAULTS = {
    "generator": {
        "kind": "lattice",
        "dims": [8, 8, 8],
        "spacing": 1.0,
        "origin": [0.0, 0.0, 0.0],
        "mass": 1.0,
        "velocity": [0.0, 0.0, 0.0],
        "velocity_noise": 0.0,
        "periodic": False,
        "count": 1000,
        "center": [0.0, 0.0, 0.0],
        "covariance": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        "separation": 1.0,
        "path": None,
    },
    "physics": {
        "eos": {"K": 1.0, "gamma": 1.0},
        "viscosity": {"alpha": 1.0, "beta": 2.0, "epsilon": 0.01},
        "external_force": [0.0, 0.0, 0.0],
    },
    "neighbors": {
        "k": 33,
        "metric": "euclidean",
        "iterations": 2,
        "floor_fraction": 1e-3,
        "support_scale": 1.0,
        "leaf_capacity": 16,
        "min_smoothing_length": 0.0,
        "stress": None,
    },
    "run": {"dt": 0.01, "steps": 100, "snapshot_interval": 10, "seed": 0},
}


class ScenarioError(ValueError):
    """Invalid scenario; ``field`` names the offending dotted key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


def _merge(defaults, given, prefix=""):
    out = copy.deepcopy(defaults)
    if given is None:
        return out
    if not isinstance(given, dict):
        raise ScenarioError(prefix.rstrip(".") or "<root>", "expected a mapping")
    for key, value in given.items():
        name = prefix + str(key)
        if key not in defaults:
            raise ScenarioError(name, "unknown key")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, name + ".")
        else:
            out[key] = value
    return out


@dataclass
class Scenario:
    """Validated scenario configuration (nested mapping plus typed accessors)."""

    config: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: Path | None = None

    def __post_init__(self):
        self.config = _merge(DEFAULTS, self.config)
        self._validate()

    def __getitem__(self, key):
        return self.config[key]

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.config == other.config

    def _validate(self):
        g, ph, nb, run = (self.config[s] for s in ("generator", "physics", "neighbors", "run"))

        def need(cond, name, msg):
            if not cond:
                raise ScenarioError(name, msg)

        need(g["kind"] in GENERATORS, "generator.kind", f"must be one of {GENERATORS}")
        need(_is_int(nb["k"]) and nb["k"] >= 1, "neighbors.k", "must be an integer >= 1")
        need(nb["metric"] in METRIC_KINDS, "neighbors.metric", f"must be one of {METRIC_KINDS}")
        need(_is_int(nb["iterations"]) and nb["iterations"] >= 0, "neighbors.iterations", "must be an integer >= 0")
        need(_num(nb["floor_fraction"]) and 0 < nb["floor_fraction"] <= 1, "neighbors.floor_fraction", "must lie in (0, 1]")
        need(_num(nb["support_scale"]) and nb["support_scale"] > 0, "neighbors.support_scale", "must be > 0")
        need(_is_int(nb["leaf_capacity"]) and nb["leaf_capacity"] >= 1, "neighbors.leaf_capacity", "must be an integer >= 1")
        need(_num(nb["min_smoothing_length"]) and nb["min_smoothing_length"] >= 0,
             "neighbors.min_smoothing_length", "must be >= 0")
        if nb["stress"] is not None:
            need(np.shape(nb["stress"]) == (3, 3), "neighbors.stress", "must be a 3x3 matrix")
        need(_num(run["dt"]) and run["dt"] > 0, "run.dt", "must be > 0")
        need(_is_int(run["steps"]) and run["steps"] >= 0, "run.steps", "must be an integer >= 0")
        need(_is_int(run["snapshot_interval"]) and run["snapshot_interval"] >= 1,
             "run.snapshot_interval", "must be an integer >= 1")
        need(_is_int(run["seed"]), "run.seed", "must be an integer")
        need(_num(g["mass"]) and g["mass"] > 0, "generator.mass", "must be > 0")
        if g["kind"] == "lattice":
            need(len(g["dims"]) == 3 and all(_is_int(d) and d >= 1 for d in g["dims"]),
                 "generator.dims", "must be three integers >= 1")
            need(_num(g["spacing"]) and g["spacing"] > 0, "generator.spacing", "must be > 0")
        elif g["kind"] == "gaussian_cloud":
            need(_is_int(g["count"]) and g["count"] >= 1, "generator.count", "must be an integer >= 1")
            cov = np.asarray(g["covariance"], dtype=float)
            need(cov.shape == (3, 3) and np.allclose(cov, cov.T) and np.linalg.eigvalsh(cov)[0] > 0,
                 "generator.covariance", "must be a symmetric positive-definite 3x3 matrix")
        elif g["kind"] == "two_body":
            need(_num(g["separation"]) and g["separation"] > 0, "generator.separation", "must be > 0")
        elif g["kind"] == "file":
            need(g["path"] is not None, "generator.path", "required for kind=file")
        eos, visc = ph["eos"], ph["viscosity"]
        need(_num(eos["K"]) and eos["K"] >= 0, "physics.eos.K", "must be >= 0")
        need(_num(eos["gamma"]) and eos["gamma"] >= 1, "physics.eos.gamma", "must be >= 1")
        for key in ("alpha", "beta"):
            need(_num(visc[key]) and visc[key] >= 0, f"physics.viscosity.{key}", "must be >= 0")
        need(_num(visc["epsilon"]) and visc["epsilon"] > 0, "physics.viscosity.epsilon", "must be > 0")
        need(np.shape(ph["external_force"]) == (3,), "physics.external_force", "must be a 3-vector")

    def force_config(self) -> ForceConfig:
        ph = self.config["physics"]
        return ForceConfig(
            K=float(ph["eos"]["K"]),
            gamma=float(ph["eos"]["gamma"]),
            alpha=float(ph["viscosity"]["alpha"]),
            beta=float(ph["viscosity"]["beta"]),
            epsilon=float(ph["viscosity"]["epsilon"]),
            external_force=np.asarray(ph["external_force"], dtype=float) if any(ph["external_force"]) else None,
        )

    def pipeline(self, metric=None, k=None) -> SPHPipeline:
        nb = self.config["neighbors"]
        return SPHPipeline(
            k=int(k if k is not None else nb["k"]),
            metric=metric or nb["metric"],
            iterations=int(nb["iterations"]),
            floor_fraction=float(nb["floor_fraction"]),
            support_scale=float(nb["support_scale"]),
            leaf_capacity=int(nb["leaf_capacity"]),
            stress=None if nb["stress"] is None else np.asarray(nb["stress"], dtype=float),
            min_smoothing_length=float(nb["min_smoothing_length"]),
        )


def _is_int(x):
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool)


def _num(x):
    return isinstance(x, (int, float, np.number)) and not isinstance(x, bool) and np.isfinite(x)


def parse_scenario(text: str, source=None) -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ScenarioError("<document>", f"parse error at {where}: {exc}") from exc
    return Scenario(data or {}, Path(source) if source else None)


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file, filling unspecified keys with defaults."""
    path = Path(path)
    return parse_scenario(path.read_text(), path)


def dump_scenario(scn: Scenario) -> str:
    return yaml.safe_dump(scn.config, sort_keys=True)


def _lattice(g):
    dims, a = g["dims"], float(g["spacing"])
    axes = [np.arange(d) * a for d in dims]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3) + np.asarray(g["origin"], float)
    return X


def _ghosts(X, V, g, width):
    """Replicate particles within ``width`` of each face to the opposite side."""
    dims, a = np.asarray(g["dims"]), float(g["spacing"])
    lo = np.asarray(g["origin"], float)
    L = dims * a
    shifts = [np.zeros(3)]
    for axis in range(3):
        new = []
        for s in shifts:
            for sign in (-1.0, 1.0):
                t = s.copy()
                t[axis] += sign * L[axis]
                new.append(t)
        shifts = shifts + new
    gx, gv = [], []
    for s in shifts[1:]:
        Y = X + s
        inside = ((Y >= lo - 0.5 * a - width) & (Y < lo + L - 0.5 * a + width)).all(axis=1)
        gx.append(Y[inside])
        gv.append(V[inside])
    return np.concatenate(gx), np.concatenate(gv)


def build_table(scn: Scenario) -> ParticleTable:
    """Generate the initial particle table, deterministic in ``run.seed``."""
    g = scn["generator"]
    rng = np.random.default_rng(scn["run"]["seed"])
    kind = g["kind"]
    if kind == "file":
        from .snapshot import read_any

        return read_any(Path(g["path"]) if scn.source is None else scn.source.parent / g["path"])
    if kind == "lattice":
        X = _lattice(g)
    elif kind == "gaussian_cloud":
        X = rng.multivariate_normal(np.asarray(g["center"], float), np.asarray(g["covariance"], float), size=g["count"])
    else:
        d = 0.5 * float(g["separation"])
        X = np.array([[-d, 0.0, 0.0], [d, 0.0, 0.0]])
    n = X.shape[0]
    if kind == "two_body":
        v = np.asarray(g["velocity"], float)
        V = np.array([v, -v])
    else:
        V = np.broadcast_to(np.asarray(g["velocity"], float), (n, 3)).copy()
        if g["velocity_noise"]:
            V += float(g["velocity_noise"]) * rng.standard_normal((n, 3))
    ghost = np.zeros(n)
    if kind == "lattice" and g["periodic"]:
        k = scn["neighbors"]["k"]
        # radius of a sphere holding k lattice sites estimates one kernel support;
        # ghosts touching real particles need their own h and density converged,
        # which takes three supports (plus slack for shell rounding)
        support = float(g["spacing"]) * (3.0 * k / (4.0 * np.pi)) ** (1.0 / 3.0) * scn["neighbors"]["support_scale"]
        width = 3.3 * support
        GX, GV = _ghosts(X, V, g, width)
        X, V = np.concatenate([X, GX]), np.concatenate([V, GV])
        ghost = np.concatenate([ghost, np.ones(GX.shape[0])])
    table = create_table(np.full(X.shape[0], float(g["mass"])), X, V)
    if kind == "lattice" and g["periodic"]:
        table.set_attribute("ghost", ghost)
    return table
