"""Grids, time stepping configuration, material models, sources and sensors.

All fields are plain numpy arrays shaped like the grid; the run precision is
the array dtype (float32 or float64). Binary dumps ravel with the first axis
varying fastest so files are reproducible across machines (see io module).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EPS_DEFAULT = 1e-5

DTYPES = {"single": np.float32, "double": np.float64}


class ConfigError(ValueError):
    """Invalid configuration or problem definition (CLI exit code 1)."""


def precision_dtype(precision):
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ConfigError(f"precision must be 'single' or 'double', got {precision!r}")


@dataclass(frozen=True)
class Grid:
    """Uniform rectilinear grid with equal spacing on every axis.

    shape holds the node counts (n1, ..., nd); extents are (ni - 1) * dx.
    """

    shape: tuple
    dx: float

    def __post_init__(self):
        if not 1 <= len(self.shape) <= 3:
            raise ConfigError(f"grid must be 1D, 2D or 3D, got {len(self.shape)} axes")
        if any(int(n) < 3 for n in self.shape):
            raise ConfigError(f"every axis needs at least 3 nodes, got {self.shape}")
        if not (self.dx > 0 and math.isfinite(self.dx)):
            raise ConfigError(f"grid spacing must be positive, got {self.dx}")
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def n_nodes(self):
        return int(np.prod(self.shape))

    @property
    def extents(self):
        return tuple((n - 1) * self.dx for n in self.shape)

    def zeros(self, dtype=np.float64):
        return np.zeros(self.shape, dtype=dtype)

    def contains(self, node):
        node = tuple(node)
        return len(node) == self.ndim and all(
            0 <= int(i) < n for i, n in zip(node, self.shape)
        )

    def flat_index(self, node):
        return int(np.ravel_multi_index(tuple(int(i) for i in node), self.shape))


def build_grid(shape, dx) -> Grid:
    """Validated Grid with derived extents."""
    return Grid(tuple(shape), float(dx))


@dataclass(frozen=True)
class TimeConfig:
    """Number of time steps and step size; t_end = n_steps * dt."""

    n_steps: int
    dt: float

    def __post_init__(self):
        if int(self.n_steps) < 2:
            raise ConfigError(f"need at least 2 time steps, got {self.n_steps}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError(f"time step size must be positive, got {self.dt}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def t_end(self):
        return self.n_steps * self.dt


RHO_SCALED = "rho_scaled"
ACOUSTIC = "acoustic"


@dataclass
class MaterialModel:
    """Indicator field gamma plus background constants for one PDE flavor.

    rho_scaled: scalar wave equation with density scaling, gamma in [eps, 1].
    acoustic:   acoustic wave equation with linear interpolation of the
                inverse bulk modulus and inverse density, gamma in [0, 1].
    """

    flavor: str
    gamma: np.ndarray
    grid: Grid
    rho0: float = 0.0
    c0: float = 0.0
    eps: float = EPS_DEFAULT
    rho1: float = 0.0
    kappa1: float = 0.0
    rho2: float = 0.0
    kappa2: float = 0.0

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma)
        if self.gamma.shape != self.grid.shape:
            raise ConfigError(
                f"gamma shape {self.gamma.shape} != grid shape {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.gamma)):
            raise ConfigError("gamma contains non-finite values")
        if self.flavor == RHO_SCALED:
            for name in ("rho0", "c0", "eps"):
                if getattr(self, name) <= 0:
                    raise ConfigError(f"{name} must be strictly positive")
            lo, hi = self.eps, 1.0
        elif self.flavor == ACOUSTIC:
            for name in ("rho1", "kappa1", "rho2", "kappa2"):
                if getattr(self, name) <= 0:
                    raise ConfigError(f"{name} must be strictly positive")
            lo, hi = 0.0, 1.0
        else:
            raise ConfigError(f"unknown material flavor {self.flavor!r}")
        # tiny slack for round-trips through float32
        slack = 4 * np.finfo(self.gamma.dtype).eps if self.gamma.dtype.kind == "f" else 0.0
        if self.gamma.min() < lo - slack or self.gamma.max() > hi + slack:
            raise ConfigError(
                f"gamma out of [{lo}, {hi}] for flavor {self.flavor}: "
                f"range [{self.gamma.min()}, {self.gamma.max()}]"
            )

    @classmethod
    def rho_scaled(cls, gamma, grid, rho0, c0, eps=EPS_DEFAULT):
        return cls(RHO_SCALED, gamma, grid, rho0=float(rho0), c0=float(c0), eps=float(eps))

    @classmethod
    def acoustic(cls, gamma, grid, rho1, kappa1, rho2, kappa2):
        return cls(
            ACOUSTIC, gamma, grid,
            rho1=float(rho1), kappa1=float(kappa1),
            rho2=float(rho2), kappa2=float(kappa2),
        )

    def with_gamma(self, gamma):
        """Same constants, new indicator field."""
        if self.flavor == RHO_SCALED:
            return MaterialModel.rho_scaled(gamma, self.grid, self.rho0, self.c0, self.eps)
        return MaterialModel.acoustic(
            gamma, self.grid, self.rho1, self.kappa1, self.rho2, self.kappa2
        )


@dataclass(frozen=True)
class SourceSpec:
    """Point excitation: sine burst injected at one interior grid node."""

    node: tuple
    amplitude: float
    frequency: float  # Hz; omega = 2 pi f
    cycles: int

    def __post_init__(self):
        object.__setattr__(self, "node", tuple(int(i) for i in self.node))
        if self.amplitude <= 0 or self.frequency <= 0:
            raise ConfigError("source amplitude and frequency must be positive")
        if int(self.cycles) < 1:
            raise ConfigError("source needs at least one cycle")
        object.__setattr__(self, "cycles", int(self.cycles))

    @property
    def omega(self):
        return 2.0 * math.pi * self.frequency

    @property
    def duration(self):
        return 2.0 * math.pi * self.cycles / self.omega

    def validate_on(self, grid: Grid):
        if not grid.contains(self.node):
            raise ConfigError(f"source node {self.node} outside grid {grid.shape}")


@dataclass
class SensorArray:
    """Distinct recording nodes plus trace storage (n_sensors x n_steps)."""

    nodes: list
    traces: np.ndarray | None = None

    def __post_init__(self):
        self.nodes = [tuple(int(i) for i in n) for n in self.nodes]
        if len(set(self.nodes)) != len(self.nodes):
            raise ConfigError("sensor nodes must be distinct")
        if not self.nodes:
            raise ConfigError("sensor array is empty")

    def __len__(self):
        return len(self.nodes)

    def validate_on(self, grid: Grid):
        for n in self.nodes:
            if not grid.contains(n):
                raise ConfigError(f"sensor node {n} outside grid {grid.shape}")

    def flat_indices(self, grid: Grid):
        return np.array([grid.flat_index(n) for n in self.nodes], dtype=np.int64)


@dataclass(frozen=True)
class CourantReport:
    """Courant number and the conservative stability verdict C <= 1/sqrt(d)."""

    courant: float
    c_max: float
    limit: float
    stable: bool


def material_wave_speed_max(material: MaterialModel) -> float:
    """Fastest admissible wave speed for the material's current state."""
    if material.flavor == RHO_SCALED:
        return material.c0
    inv_rho, inv_kappa = interpolate_material_fields(material)
    # c^2 = kappa / rho = rho^{-1} / kappa^{-1}
    return float(np.sqrt(np.max(inv_rho / inv_kappa)))


def interpolate_material_fields(material: MaterialModel):
    """(rho^-1, kappa^-1) fields for the acoustic flavor, linear in gamma."""
    if material.flavor != ACOUSTIC:
        raise ConfigError("material interpolation applies to the acoustic flavor only")
    g = material.gamma
    inv_rho = 1.0 / material.rho1 + g * (1.0 / material.rho2 - 1.0 / material.rho1)
    inv_kappa = 1.0 / material.kappa1 + g * (1.0 / material.kappa2 - 1.0 / material.kappa1)
    return inv_rho, inv_kappa


def cfl_report(grid: Grid, material: MaterialModel, dt) -> CourantReport:
    """Courant number C = c_max * dt / dx against the 1/sqrt(d) limit.

    Report-only; dt may be any non-negative number (pass time.dt for a run).
    """
    dt = float(dt.dt) if isinstance(dt, TimeConfig) else float(dt)
    c_max = material_wave_speed_max(material)
    courant = c_max * dt / grid.dx
    limit = 1.0 / math.sqrt(grid.ndim)
    return CourantReport(courant=courant, c_max=c_max, limit=limit, stable=courant <= limit)
