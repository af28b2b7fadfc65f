"""Transient acoustic topology optimization: material interpolation, the
regional pressure objective, density filtering with Heaviside projection and
beta continuation, and the design loop."""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .grids import (
    ConfigError,
    Grid,
    MaterialModel,
    SourceSpec,
    TimeConfig,
)
from .gradients import (
    SuperpositionConfig,
    forward_cost,
    gradient_reference,
    gradient_superposed,
)
from .optim import AdamState, NumericalDivergenceError, adam_step, clip_bounds

DIVERGENCE_FACTOR = 10.0
BETA_GROWTH = 1.1
BETA_PERIOD = 5


def interpolate_material(gamma_bar, rho1, kappa1, rho2, kappa2):
    """Inverse density and inverse bulk modulus, linear in the indicator.

    gamma = 0 recovers material 1 (air), gamma = 1 material 2 (solid).
    """
    g = np.asarray(gamma_bar, dtype=float)
    if g.min() < 0.0 or g.max() > 1.0:
        raise ConfigError(
            f"indicator out of [0, 1]: range [{g.min()}, {g.max()}]"
        )
    inv_rho = 1.0 / rho1 + g * (1.0 / rho2 - 1.0 / rho1)
    inv_kappa = 1.0 / kappa1 + g * (1.0 / kappa2 - 1.0 / kappa1)
    return inv_rho, inv_kappa


def cost_tato(u_region_history, area, dt, dx, ndim, mode="suppress"):
    """(1/A) sum_steps sum_region u^2 dx^d dt, negated in amplify mode."""
    if area <= 0:
        raise ConfigError(f"region area must be positive, got {area}")
    u = np.asarray(u_region_history, dtype=np.float64)
    if u.size == 0:
        raise ConfigError("objective region history is empty")
    sign = 1.0 if mode == "suppress" else -1.0
    return sign * float(np.sum(u * u)) * dx**ndim * dt / area


@lru_cache(maxsize=16)
def _filter_kernel(r_f, ndim):
    """Linear-decay weights w = r_f - |offset| on the integer offsets with
    |offset| < r_f (cell units)."""
    reach = int(math.ceil(r_f))
    axes = [np.arange(-reach, reach + 1)] * ndim
    grids = np.meshgrid(*axes, indexing="ij")
    dist = np.sqrt(sum(g.astype(float) ** 2 for g in grids))
    kernel = np.where(dist < r_f, r_f - dist, 0.0)
    return kernel


def _masked_correlate(values, mask, r_f):
    kernel = _filter_kernel(float(r_f), values.ndim)
    num = ndimage.correlate(np.where(mask, values, 0.0), kernel, mode="constant")
    den = ndimage.correlate(mask.astype(float), kernel, mode="constant")
    return num, den


def density_filter(gamma, r_f, design_mask=None):
    """Normalized linear-decay smoothing restricted to the design region.

    Neighborhoods truncate at the region boundary with renormalized weights;
    nodes outside the region pass through unchanged.
    """
    if r_f <= 0:
        raise ConfigError(f"filter radius must be positive, got {r_f}")
    gamma = np.asarray(gamma, dtype=float)
    mask = (np.ones_like(gamma, dtype=bool) if design_mask is None
            else np.asarray(design_mask, dtype=bool))
    num, den = _masked_correlate(gamma, mask, r_f)
    out = gamma.copy()
    out[mask] = num[mask] / den[mask]
    return out


def heaviside_project(gamma_tilde, beta, eta=0.5):
    """Smooth thresholding toward a 0/1 design, clipped to [0, 1].

    Maps 0 -> 0 and 1 -> 1 exactly for any sharpness beta.
    """
    if beta <= 0 or not 0.0 < eta < 1.0:
        raise ConfigError(f"need beta > 0 and eta in (0, 1), got {beta}, {eta}")
    g = np.asarray(gamma_tilde, dtype=float)
    denom = math.tanh(beta * eta) + math.tanh(beta * (1.0 - eta))
    out = (math.tanh(beta * eta) + np.tanh(beta * (g - eta))) / denom
    return np.clip(out, 0.0, 1.0)


def project_derivative(gamma_tilde, beta, eta=0.5):
    """Derivative of the smooth threshold with respect to its input."""
    g = np.asarray(gamma_tilde, dtype=float)
    denom = math.tanh(beta * eta) + math.tanh(beta * (1.0 - eta))
    return beta / (denom * np.cosh(beta * (g - eta)) ** 2)


def beta_schedule(iteration):
    """Sharpness continuation: starts at 1, +10% every five iterations."""
    if iteration < 0:
        raise ConfigError("iteration must be non-negative")
    return BETA_GROWTH ** (int(iteration) // BETA_PERIOD)


def chain_rule(dcost_dbar, gamma_tilde, beta, eta, r_f, design_mask=None):
    """Pull the objective gradient back through projection and filter.

    Multiplies by the projection derivative nodewise, then applies the
    filter transpose with the same truncated, renormalized weights.
    """
    g = np.asarray(dcost_dbar, dtype=float)
    mask = (np.ones_like(g, dtype=bool) if design_mask is None
            else np.asarray(design_mask, dtype=bool))
    inner = np.where(mask, g * project_derivative(gamma_tilde, beta, eta), 0.0)
    _, den = _masked_correlate(inner, mask, r_f)
    ratio = np.zeros_like(inner)
    ratio[mask] = inner[mask] / den[mask]
    kernel = _filter_kernel(float(r_f), g.ndim)
    out = ndimage.correlate(ratio, kernel, mode="constant")
    out[~mask] = 0.0
    return out


class TatoShot:
    """Objective-region bookkeeping: the region is both the cost support and
    the adjoint source support."""

    def __init__(self, support_idx, area, dt, dx, ndim, mode):
        self.support_idx = support_idx
        self.area = area
        self.dt = dt
        self.cell = dx**ndim
        self.sign = 1.0 if mode == "suppress" else -1.0

    def adjoint_values(self, u_support, n):
        # the solver injects nodal values directly, so the regional source
        # density -2u/A carries its cell volume: -(1/dt) dC/du_i
        return (-self.sign * 2.0 * self.cell / self.area) * np.asarray(
            u_support, dtype=np.float64
        )

    def cost_increment(self, u_support, n):
        u = np.asarray(u_support, dtype=np.float64)
        return self.sign * float(np.dot(u, u)) * self.cell * self.dt / self.area


@dataclass
class TatoProblem:
    """Design region, objective region, acoustic constants and loop settings."""

    grid: Grid
    time: TimeConfig
    source: SourceSpec
    design_mask: np.ndarray
    objective_mask: np.ndarray
    rho1: float = 1.204
    kappa1: float = 1.419e5
    rho2: float = 2643.0
    kappa2: float = 6.87e8
    r_f: float = 1.5
    eta: float = 0.5
    mode: str = "suppress"
    alpha: float = 0.1
    iterations: int = 150
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.source.validate_on(self.grid)
        self.design_mask = np.asarray(self.design_mask, dtype=bool)
        self.objective_mask = np.asarray(self.objective_mask, dtype=bool)
        for name in ("design_mask", "objective_mask"):
            m = getattr(self, name)
            if m.shape != self.grid.shape:
                raise ConfigError(f"{name} shape {m.shape} != grid {self.grid.shape}")
        if not self.objective_mask.any():
            raise ConfigError("objective region is empty")
        if not self.design_mask.any():
            raise ConfigError("design region is empty")
        if self.mode not in ("suppress", "amplify"):
            raise ConfigError(f"mode must be suppress or amplify, got {self.mode!r}")
        if self.r_f <= 0 or not 0.0 < self.eta < 1.0:
            raise ConfigError("need r_f > 0 and eta in (0, 1)")

    @property
    def area(self):
        return float(self.objective_mask.sum()) * self.grid.dx**self.grid.ndim

    def material(self, gamma_bar):
        return MaterialModel.acoustic(
            gamma_bar, self.grid, self.rho1, self.kappa1, self.rho2, self.kappa2
        )

    def shots(self):
        support = np.flatnonzero(self.objective_mask.reshape(-1)).astype(np.int64)
        yield self.source, TatoShot(
            support, self.area, self.time.dt, self.grid.dx, self.grid.ndim, self.mode
        )


def design_fields(problem: TatoProblem, gamma_raw, iteration):
    """(beta, filtered, projected-and-clipped) chain for one iteration."""
    beta = beta_schedule(iteration)
    g_tilde = density_filter(gamma_raw, problem.r_f, problem.design_mask)
    g_bar = heaviside_project(g_tilde, beta, problem.eta)
    g_bar = np.where(problem.design_mask, g_bar, 0.0)
    return beta, g_tilde, g_bar


@dataclass
class DesignResult:
    gamma_raw: np.ndarray
    design: np.ndarray
    design_history: list
    log: list = field(default_factory=list)


def optimize_design(problem: TatoProblem, method="superposed", k=None,
                    iterations=None, precision="double", snapshot_every=25,
                    progress=None) -> DesignResult:
    """Design loop: filter, project, simulate, chain rule, Adam, clip.

    Starts from an all-air design (gamma = 0 on the design region). The raw
    design variables are clipped to [0, 1] alongside the projected field so
    the optimizer state stays meaningful.
    """
    if method not in ("superposed", "reference"):
        raise ConfigError(f"unknown gradient method {method!r}")
    if method == "superposed" and k is None:
        raise ConfigError("superposed gradients need k (run calibration first)")
    iterations = problem.iterations if iterations is None else int(iterations)

    gamma_raw = np.zeros(problem.grid.shape)
    adam = AdamState.fresh(problem.grid.shape, alpha=problem.alpha,
                           beta1=problem.adam_beta1, beta2=problem.adam_beta2,
                           eps=problem.adam_eps)
    frozen = ~problem.design_mask
    log = []
    history = []
    initial_cost = None
    g_bar = np.zeros_like(gamma_raw)
    for it in range(iterations):
        t0 = _time.perf_counter()
        beta, g_tilde, g_bar = design_fields(problem, gamma_raw, it)
        material = problem.material(g_bar)
        if method == "superposed":
            res = gradient_superposed(
                problem, material, SuperpositionConfig(k=k, precision=precision)
            )
        else:
            res = gradient_reference(problem, material, precision=precision)
        grad = chain_rule(
            np.asarray(res.gradient, dtype=np.float64), g_tilde, beta,
            problem.eta, problem.r_f, problem.design_mask,
        )
        row = {
            "iteration": it,
            "cost": res.cost,
            "grad_norm": float(np.linalg.norm(grad)),
            "beta": beta,
            "wall_time": _time.perf_counter() - t0,
        }
        log.append(row)
        if progress is not None:
            progress(row)
        if initial_cost is None:
            initial_cost = res.cost
        elif res.cost > DIVERGENCE_FACTOR * max(abs(initial_cost), 1e-300):
            raise NumericalDivergenceError(
                f"cost {res.cost:g} grew past {DIVERGENCE_FACTOR}x the initial "
                f"{initial_cost:g} at iteration {it}"
            )
        adam, gamma_raw = adam_step(adam, gamma_raw, grad)
        gamma_raw = clip_bounds(gamma_raw, 0.0, 1.0, frozen_mask=frozen,
                                frozen_value=0.0)
        if snapshot_every and (it + 1) % snapshot_every == 0:
            history.append(g_bar.copy())
    beta, _, g_bar = design_fields(problem, gamma_raw, iterations)
    final_cost = forward_cost(problem, problem.material(g_bar), precision=precision)
    log.append({"iteration": iterations, "cost": final_cost,
                "grad_norm": float("nan"), "beta": beta, "wall_time": 0.0})
    history.append(g_bar.copy())
    return DesignResult(gamma_raw=gamma_raw, design=g_bar,
                        design_history=history, log=log)
