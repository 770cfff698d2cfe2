"""Particle descriptor table and timestamped snapshots.

State is kept as parallel per-field arrays indexed by a dense particle id
``0..n-1``; the hot loops stream one field at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["ParticleTable", "Snapshot", "create_table", "get_attribute", "set_attribute"]

# scalar fields that can be addressed by name alongside user attributes
BUILTIN_FIELDS = ("mass", "density", "pressure")


def _first_bad_row(mask):
    return int(np.flatnonzero(mask)[0])


class ParticleTable:
    """Per-particle mass, position, velocity, density, pressure and attributes.

    Densities and pressures start at zero, meaning "not yet computed".
    Anything that divides by density checks positivity first.
    """

    def __init__(self, mass, position, velocity, density=None, pressure=None, attributes=None):
        self.mass = np.ascontiguousarray(mass, dtype=np.float64)
        self.position = np.ascontiguousarray(position, dtype=np.float64)
        self.velocity = np.ascontiguousarray(velocity, dtype=np.float64)
        n = self.mass.shape[0]
        self.density = (
            np.zeros(n) if density is None else np.ascontiguousarray(density, dtype=np.float64)
        )
        self.pressure = (
            np.zeros(n) if pressure is None else np.ascontiguousarray(pressure, dtype=np.float64)
        )
        self.attributes: dict[str, np.ndarray] = {}
        for name, values in (attributes or {}).items():
            self.set_attribute(name, values)
        self._check()

    def _check(self):
        n = self.mass.shape[0]
        if self.mass.ndim != 1 or n == 0:
            raise ValueError("particle table needs a non-empty 1-D mass array")
        for name in ("position", "velocity"):
            arr = getattr(self, name)
            if arr.shape != (n, 3):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n}, 3)")
            bad = ~np.isfinite(arr).all(axis=1)
            if bad.any():
                raise ValueError(f"non-finite {name} at particle index {_first_bad_row(bad)}")
        bad = ~(np.isfinite(self.mass) & (self.mass > 0))
        if bad.any():
            raise ValueError(f"mass must be finite and > 0; violated at particle index {_first_bad_row(bad)}")
        for name in ("density", "pressure"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have length {n}")

    @property
    def n(self) -> int:
        return self.mass.shape[0]

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"ParticleTable(n={self.n}, attributes={sorted(self.attributes)})"

    def set_attribute(self, name: str, values) -> None:
        values = np.array(values, dtype=np.float64)
        if values.shape != (self.n,):
            raise ValueError(f"attribute {name!r} needs {self.n} values, got shape {values.shape}")
        if name in BUILTIN_FIELDS:
            raise ValueError(f"{name!r} is a built-in field, not an attribute")
        self.attributes[name] = values

    def get_attribute(self, name: str) -> np.ndarray:
        """Return the per-particle values stored under ``name``.

        Built-in scalar fields (``mass``, ``density``, ``pressure``) are
        addressable too, so interpolation can run on them directly.
        """
        if name in self.attributes:
            return self.attributes[name]
        if name in BUILTIN_FIELDS:
            return getattr(self, name)
        raise KeyError(f"unknown attribute {name!r}")

    def require_density(self) -> np.ndarray:
        bad = ~(self.density > 0)
        if bad.any():
            raise ValueError(
                f"density not positive at particle index {_first_bad_row(bad)}; run a density pass first"
            )
        return self.density

    def copy(self) -> "ParticleTable":
        return ParticleTable(
            self.mass.copy(),
            self.position.copy(),
            self.velocity.copy(),
            self.density.copy(),
            self.pressure.copy(),
            {k: v.copy() for k, v in self.attributes.items()},
        )

    def equals(self, other: "ParticleTable") -> bool:
        """Bit-exact comparison of every field."""

        def same(a, b):
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            same(self.mass, other.mass)
            and same(self.position, other.position)
            and same(self.velocity, other.velocity)
            and same(self.density, other.density)
            and same(self.pressure, other.pressure)
            and list(self.attributes) == list(other.attributes)
            and all(same(v, other.attributes[k]) for k, v in self.attributes.items())
        )


def create_table(masses, positions, velocities) -> ParticleTable:
    """Build a table from equal-length mass, position and velocity lists."""
    masses = np.asarray(masses, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3) if len(positions) else np.empty((0, 3))
    velocities = np.asarray(velocities, dtype=np.float64).reshape(-1, 3) if len(velocities) else np.empty((0, 3))
    lengths = {len(masses), len(positions), len(velocities)}
    if len(lengths) != 1:
        raise ValueError(
            f"length mismatch: {len(masses)} masses, {len(positions)} positions, {len(velocities)} velocities"
        )
    return ParticleTable(masses, positions, velocities)


def get_attribute(table: ParticleTable, name: str) -> np.ndarray:
    return table.get_attribute(name)


def set_attribute(table: ParticleTable, name: str, values) -> None:
    table.set_attribute(name, values)


@dataclass
class Snapshot:
    """Full particle state at one step of a run."""

    time: float
    step: int
    table: ParticleTable = field(repr=False)

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("snapshot step must be >= 0")
        if not np.isfinite(self.time):
            raise ValueError("snapshot time must be finite")

    @classmethod
    def capture(cls, table: ParticleTable, time: float, step: int) -> "Snapshot":
        return cls(float(time), int(step), table.copy())
