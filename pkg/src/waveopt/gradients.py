"""Adjoint sensitivity computation.

Two engines compute the same nodewise gradient dC/dgamma:

* gradient_reference stores the full forward history and pairs it with an
  adjoint solve run backwards in time (the standard adjoint method).
* gradient_superposed never stores the forward field. During the forward
  pass it subtracts the self-kernel of u and records the adjoint forces on
  their compact support only; it then re-integrates the superposed field
  u + k u_adj backwards, adding its self-kernel. Because the scheme is
  linear and the kernel bilinear, the scaled difference approximates the
  mixed kernel while holding only four field-sized buffers.

Both engines accumulate the kernel at the interior time centers
n = 1 .. N-1 with central-difference velocities, so the bilinear expansion
identity holds exactly (to rounding) between them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grids import (
    ACOUSTIC,
    RHO_SCALED,
    ConfigError,
    Grid,
    MaterialModel,
    SensorArray,
    TimeConfig,
    precision_dtype,
)
from .kernels import apply_kernel_increment
from .solver import (
    DEFAULT_HISTORY_BUDGET,
    STABILITY_CHECK_INTERVAL,
    ResourceBudgetError,
    SolverInstabilityError,
    SolverWindow,
    burst_amplitude,
    check_finite,
    injection_scale,
    prepare_material,
    step_window,
)

DEFAULT_ADJOINT_FORCE_BUDGET = 2 * 1024**3  # bytes of compact adjoint storage


class BufferCounter:
    """Ledger of persistent field-sized allocations made by a gradient run.

    Only buffers that live across the time loop are registered; numpy's
    transient expression temporaries are not held state and do not count.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        self.live_fields = 0
        self.peak_fields = 0
        self.field_bytes = 0
        self.history_bytes = 0
        self.aux_bytes = 0

    def zeros(self, shape, dtype):
        if tuple(shape) != self.grid.shape:
            raise ValueError(f"field buffer shape {shape} != grid {self.grid.shape}")
        arr = np.zeros(shape, dtype=dtype)
        self.live_fields += 1
        self.peak_fields = max(self.peak_fields, self.live_fields)
        self.field_bytes += arr.nbytes
        return arr

    def release(self, arr):
        self.live_fields -= 1
        self.field_bytes -= arr.nbytes

    def track_history(self, nbytes):
        self.history_bytes += int(nbytes)

    def track_aux(self, nbytes):
        self.aux_bytes += int(nbytes)


@dataclass
class KernelAccumulator:
    """Running field-sized sum approximating the Frechet kernel."""

    values: np.ndarray
    flavor: str

    @classmethod
    def zeros(cls, grid: Grid, flavor, dtype=np.float64, allocate=np.zeros):
        return cls(values=allocate(grid.shape, dtype=dtype), flavor=flavor)

    def reset(self):
        self.values[...] = 0


@dataclass(frozen=True)
class SuperpositionConfig:
    """Scaling factor k and run precision for the superposed-field engine."""

    k: float
    precision: str = "double"
    compare_double: bool = False

    def __post_init__(self):
        if not (self.k > 0 and math.isfinite(self.k)):
            raise ConfigError(f"superposition factor k must be positive, got {self.k}")


def kernel_coefficients(material: MaterialModel):
    """(velocity, gradient) kernel coefficients, signs folded in.

    Two integrations by parts give the pattern -a(du_adj/dt)(du/dt)
    + b grad(u_adj).grad(u), with (a, b) the indicator derivatives of the
    PDE's inertia and flux coefficients; the finite-difference oracle pins
    the relative sign.
    """
    if material.flavor == RHO_SCALED:
        return -material.rho0, material.rho0 * material.c0**2
    dk = 1.0 / material.kappa2 - 1.0 / material.kappa1
    dr = 1.0 / material.rho2 - 1.0 / material.rho1
    return -dk, dr


def kernel_increment(accum: KernelAccumulator, window_a, window_b,
                     material: MaterialModel, dt, dx, sign=1):
    """Add one rectangle-rule kernel increment for the window pair (a, b).

    Windows are (older, mid, newer) level triples in physical time order;
    velocities are central differences over the triple and spatial gradients
    average the two face differences of the mid level. The increment is
    exactly bilinear and symmetric in (a, b).
    """
    if accum.flavor != material.flavor:
        raise ConfigError(
            f"accumulator flavor {accum.flavor!r} != material {material.flavor!r}"
        )
    cv, cg = kernel_coefficients(material)
    apply_kernel_increment(
        accum.values, tuple(window_a), tuple(window_b),
        cv, cg, 1.0 / (2.0 * dt), 1.0 / (2.0 * dx), sign * dt,
    )
    return accum


def adjoint_source_fwi(u_at_sensors, measured, sensors: SensorArray, grid: Grid):
    """Dense adjoint source field: -(u - u_measured) injected at the sensors."""
    u_at_sensors = np.asarray(u_at_sensors, dtype=float)
    measured = np.asarray(measured, dtype=float)
    if u_at_sensors.shape != measured.shape or len(u_at_sensors) != len(sensors):
        raise ConfigError(
            f"sensor value shapes differ: {u_at_sensors.shape} vs {measured.shape} "
            f"for {len(sensors)} sensors"
        )
    out = grid.zeros()
    out.reshape(-1)[sensors.flat_indices(grid)] = -(u_at_sensors - measured)
    return out


def adjoint_source_tato(u, region_mask, area, mode="suppress"):
    """Dense adjoint source field: -2u/A inside the objective region.

    The sign flips in amplification mode.
    """
    region_mask = np.asarray(region_mask, dtype=bool)
    if not region_mask.any():
        raise ConfigError("objective region is empty")
    if area <= 0:
        raise ConfigError(f"region area must be positive, got {area}")
    sign = -1.0 if mode == "suppress" else 1.0
    out = np.zeros_like(u, dtype=float)
    out[region_mask] = sign * 2.0 * u[region_mask] / area
    return out


@dataclass
class GradientResult:
    cost: float
    gradient: np.ndarray
    counter: BufferCounter
    k: float | None = None
    twin_gradient: np.ndarray | None = None


def _shot_list(problem):
    shots = list(problem.shots())
    if not shots:
        raise ConfigError("problem defines no shots")
    return shots


def _forward_scale(prep, source, n_steps):
    return injection_scale([source], prep) * n_steps


def _alloc_adjoint_store(counter, n_steps, support, dtype, budget):
    need = n_steps * len(support) * np.dtype(dtype).itemsize
    if need > budget:
        raise ResourceBudgetError(
            f"adjoint force storage needs {need} bytes "
            f"({n_steps} steps x {len(support)} support nodes) > budget {budget}"
        )
    counter.track_aux(need)
    return np.zeros((n_steps, len(support)), dtype=dtype)


def _forward_pass(prep, time: TimeConfig, source, shot, window, accum_values,
                  coeffs, adj_store, history=None):
    """Forward sweep of either engine.

    Records compact adjoint forces at the interior centers, accumulates the
    cost, and (superposed engine) subtracts the self-kernel increments; the
    reference engine passes accum_values=None and a history buffer instead.
    """
    grid = prep.grid
    dt, dx = time.dt, grid.dx
    n_steps = time.n_steps
    support = shot.support_idx
    src_idx = np.array([grid.flat_index(source.node)], dtype=np.int64)
    cv, cg = coeffs
    inv2dt, inv2dx = 1.0 / (2.0 * dt), 1.0 / (2.0 * dx)
    scale = _forward_scale(prep, source, n_steps)

    cost = shot.cost_increment(np.zeros(len(support)), 0)  # entry 0 is u^0 = 0
    peak = 0.0
    if history is not None:
        history[0] = window.u_prev
        history[1] = window.u_cur
    for n in range(1, n_steps):
        u_sup = window.u_cur.reshape(-1)[support]  # level u^n, trace entry n
        cost += shot.cost_increment(u_sup, n)
        adj_store[n] = shot.adjoint_values(u_sup, n)
        force = (src_idx, np.array([burst_amplitude(n * dt, source)]))
        step_window(window, prep, force)
        if accum_values is not None:
            win = (window.u_prev, window.u_cur, window.u_next)
            apply_kernel_increment(accum_values, win, win, cv, cg, inv2dt, inv2dx, -dt)
        if history is not None:
            history[n + 1] = window.u_next
        if n % STABILITY_CHECK_INTERVAL == 0 or n == n_steps - 1:
            peak = max(peak, check_finite(window.u_next, n + 1, scale))
        window.rotate()
    return cost


def _superposed_backward(prep, time: TimeConfig, source, shot, window,
                         accum_values, coeffs, adj_store, k):
    """Backward sweep re-integrating u + k u_adj and adding its self-kernel."""
    grid = prep.grid
    dt, dx = time.dt, grid.dx
    support = shot.support_idx
    src_idx = np.array([grid.flat_index(source.node)], dtype=np.int64)
    cv, cg = coeffs
    inv2dt, inv2dx = 1.0 / (2.0 * dt), 1.0 / (2.0 * dx)

    adj_store *= adj_store.dtype.type(k)
    window.swap_direction()  # u_prev <- u^N, u_cur <- u^{N-1}
    flat_fc = prep.force_coef.reshape(-1)
    for n in range(time.n_steps - 1, 0, -1):
        step_window(window, prep, (src_idx, np.array([burst_amplitude(n * dt, source)])))
        out = window.u_next.reshape(-1)
        out[support] += flat_fc[support] * adj_store[n]
        win = (window.u_next, window.u_cur, window.u_prev)  # physical time order
        apply_kernel_increment(accum_values, win, win, cv, cg, inv2dt, inv2dx, dt)
        if n % STABILITY_CHECK_INTERVAL == 0 or n == 1:
            try:
                check_finite(window.u_next, n - 1)
            except SolverInstabilityError as exc:
                raise SolverInstabilityError(
                    exc.step, exc.max_abs,
                    detail="superposed pass diverged; raise k if underflowing, "
                           "lower k if the approximation blows up",
                ) from None
        window.rotate()


def gradient_superposed(problem, material: MaterialModel, config,
                        counter: BufferCounter | None = None,
                        adjoint_budget=DEFAULT_ADJOINT_FORCE_BUDGET) -> GradientResult:
    """Memory-efficient gradient: cost plus kernel from two sweeps per shot.

    Holds exactly four field-sized buffers (three-level window plus the
    kernel accumulator) for any number of time steps; adjoint forces are
    kept only on the sensor/region support. config is a SuperpositionConfig
    or a plain k value (double precision).
    """
    if not isinstance(config, SuperpositionConfig):
        config = SuperpositionConfig(k=float(config))
    dtype = precision_dtype(config.precision)
    grid, time = problem.grid, problem.time
    counter = counter or BufferCounter(grid)
    coeffs = kernel_coefficients(material)
    prep = prepare_material(material, time.dt, dtype=dtype)

    accum = counter.zeros(grid.shape, dtype)
    window = SolverWindow.zeros(grid, dtype=dtype, allocate=counter.zeros)
    total_cost = 0.0
    for source, shot in _shot_list(problem):
        adj = _alloc_adjoint_store(counter, time.n_steps, shot.support_idx,
                                   dtype, adjoint_budget)
        for level in (window.u_prev, window.u_cur):
            level[...] = 0
        window.step = 1
        total_cost += _forward_pass(prep, time, source, shot, window, accum,
                                    coeffs, adj)
        _superposed_backward(prep, time, source, shot, window, accum, coeffs,
                             adj, config.k)
    accum /= dtype.type(2.0 * config.k)  # scale once at return, in place
    gradient = accum
    for buf in (accum, window.u_prev, window.u_cur, window.u_next):
        counter.release(buf)

    twin = None
    if config.compare_double and config.precision != "double":
        twin_cfg = SuperpositionConfig(k=config.k, precision="double")
        twin = gradient_superposed(problem, material, twin_cfg,
                                   adjoint_budget=adjoint_budget).gradient
    return GradientResult(cost=total_cost, gradient=gradient, counter=counter,
                          k=config.k, twin_gradient=twin)


def gradient_reference(problem, material: MaterialModel,
                       precision="double",
                       counter: BufferCounter | None = None,
                       history_budget=DEFAULT_HISTORY_BUDGET,
                       adjoint_budget=DEFAULT_ADJOINT_FORCE_BUDGET) -> GradientResult:
    """Standard adjoint gradient with the forward field kept in memory.

    Stores all N+1 forward levels per shot and integrates the adjoint
    backwards from homogeneous end conditions, accumulating the mixed kernel
    at the interior time centers.
    """
    dtype = precision_dtype(precision)
    grid, time = problem.grid, problem.time
    counter = counter or BufferCounter(grid)
    coeffs = kernel_coefficients(material)
    prep = prepare_material(material, time.dt, dtype=dtype)
    n_steps = time.n_steps
    dt, dx = time.dt, grid.dx
    inv2dt, inv2dx = 1.0 / (2.0 * dt), 1.0 / (2.0 * dx)
    cv, cg = coeffs

    need = (n_steps + 1) * grid.n_nodes * np.dtype(dtype).itemsize
    if need > history_budget:
        raise ResourceBudgetError(
            f"forward history needs {need} bytes ({n_steps + 1} levels of "
            f"{grid.n_nodes} nodes) > budget {history_budget}"
        )
    history = np.zeros((n_steps + 1,) + grid.shape, dtype=dtype)
    counter.track_history(history.nbytes)

    accum = counter.zeros(grid.shape, dtype)
    window = SolverWindow.zeros(grid, dtype=dtype, allocate=counter.zeros)
    adjoint = SolverWindow.zeros(grid, dtype=dtype, allocate=counter.zeros)
    total_cost = 0.0
    for source, shot in _shot_list(problem):
        adj = _alloc_adjoint_store(counter, n_steps, shot.support_idx, dtype,
                                   adjoint_budget)
        for level in (window.u_prev, window.u_cur):
            level[...] = 0
        window.step = 1
        total_cost += _forward_pass(prep, time, source, shot, window, None,
                                    coeffs, adj, history=history)
        # adjoint end conditions: both latest levels zero
        for level in (adjoint.u_prev, adjoint.u_cur, adjoint.u_next):
            level[...] = 0
        flat_fc = prep.force_coef.reshape(-1)
        support = shot.support_idx
        for n in range(n_steps - 1, 0, -1):
            step_window(adjoint, prep)
            out = adjoint.u_next.reshape(-1)
            out[support] += flat_fc[support] * adj[n]
            fwd_win = (history[n - 1], history[n], history[n + 1])
            adj_win = (adjoint.u_next, adjoint.u_cur, adjoint.u_prev)
            apply_kernel_increment(accum, fwd_win, adj_win, cv, cg,
                                   inv2dt, inv2dx, dt)
            if n % STABILITY_CHECK_INTERVAL == 0 or n == 1:
                check_finite(adjoint.u_next, n - 1)
            adjoint.rotate()
    gradient = accum
    for buf in (accum, window.u_prev, window.u_cur, window.u_next,
                adjoint.u_prev, adjoint.u_cur, adjoint.u_next):
        counter.release(buf)
    return GradientResult(cost=total_cost, gradient=gradient, counter=counter)


def forward_cost(problem, material: MaterialModel, precision="double") -> float:
    """Objective value only: one forward solve per shot, nothing stored."""
    dtype = precision_dtype(precision)
    grid, time = problem.grid, problem.time
    prep = prepare_material(material, time.dt, dtype=dtype)
    total = 0.0
    for source, shot in _shot_list(problem):
        window = SolverWindow.zeros(grid, dtype=dtype)
        support = shot.support_idx
        src_idx = np.array([grid.flat_index(source.node)], dtype=np.int64)
        scale = _forward_scale(prep, source, time.n_steps)
        cost = shot.cost_increment(np.zeros(len(support)), 0)
        for n in range(1, time.n_steps):
            cost += shot.cost_increment(window.u_cur.reshape(-1)[support], n)
            force = (src_idx, np.array([burst_amplitude(n * time.dt, source)]))
            step_window(window, prep, force)
            if n % STABILITY_CHECK_INTERVAL == 0 or n == time.n_steps - 1:
                check_finite(window.u_next, n + 1, scale)
            window.rotate()
        total += cost
    return total


def _material_bounds(material: MaterialModel):
    if material.flavor == RHO_SCALED:
        return material.eps, 1.0
    return 0.0, 1.0


def gradient_fd_oracle(problem, material: MaterialModel, nodes, h,
                       cost_fn=None):
    """Central finite differences of the cost at selected nodes.

    Each sample runs two full forward solves with gamma perturbed by +/-h at
    that node; h shrinks (with a warning) where the perturbation would leave
    the admissible indicator range. cost_fn(material) -> float may override
    the plain forward cost, e.g. to differentiate through a design chain.
    """
    if cost_fn is None:
        cost_fn = lambda m: forward_cost(problem, m)
    lo, hi = _material_bounds(material)
    out = []
    for node in nodes:
        node = tuple(int(i) for i in node)
        g0 = float(material.gamma[node])
        h_eff = min(h, g0 - lo, hi - g0)
        if h_eff <= 0:
            raise ConfigError(
                f"gamma at {node} sits on the bound, cannot difference centrally"
            )
        if h_eff < h:
            warnings.warn(
                f"shrinking FD step at {node} to {h_eff:g} to stay in [{lo}, {hi}]"
            )
        for sign in (+1.0, -1.0):
            gam = material.gamma.astype(float).copy()
            gam[node] = g0 + sign * h_eff
            cost = cost_fn(material.with_gamma(gam))
            if sign > 0:
                c_plus = cost
            else:
                c_minus = cost
        out.append((c_plus - c_minus) / (2.0 * h_eff))
    return np.array(out)


def rel_mse(values, reference):
    """Relative mean-squared error sum((a-b)^2) / sum(b^2)."""
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    b = np.asarray(reference, dtype=np.float64).reshape(-1)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return math.inf
    denom = float(np.dot(b, b))
    num = float(np.dot(a - b, a - b))
    if denom == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / denom


@dataclass
class CalibrationResult:
    k: float
    rows: list          # (k, rel difference single vs double)
    diverged_at: float | None


def calibrate_k(problem, material: MaterialModel, k_start,
                decade_step=10.0, rel_tol=1e-2,
                min_decades=10, max_decades=22) -> CalibrationResult:
    """Walk k downwards until single and double precision disagree.

    At each decade the superposed gradient is evaluated in both precisions;
    overflow/underflow shows up as a relative difference above rel_tol while
    the pure approximation error (large k) affects both precisions alike.
    The accepted k is the last one before the precision divergence. No
    reference gradient is needed.
    """
    rows = []
    last_ok = None
    diverged_at = None
    k = float(k_start)
    for i in range(max_decades + 1):
        try:
            res = gradient_superposed(
                problem, material,
                SuperpositionConfig(k=k, precision="single", compare_double=True),
            )
            g_single, g_double = res.gradient, res.twin_gradient
            if i == 0 and not np.any(g_double):
                rows.append((k, 0.0))
                return CalibrationResult(k=float(k_start), rows=rows, diverged_at=None)
            diff = rel_mse(g_single, g_double)
        except SolverInstabilityError:
            diff = math.inf
        rows.append((k, diff))
        ok = diff <= rel_tol
        if ok and diverged_at is None:
            last_ok = k
        elif not ok and last_ok is not None and diverged_at is None:
            diverged_at = k
        if diverged_at is not None and i + 1 >= min_decades:
            break
        k /= decade_step
    if last_ok is None:
        table = "\n".join(f"  k={kk:.3e}  rel_diff={d:.3e}" for kk, d in rows)
        raise ConfigError(
            f"no admissible k found over {len(rows)} decades from {k_start:g}:\n{table}"
        )
    return CalibrationResult(k=last_ok, rows=rows, diverged_at=diverged_at)


def ksweep(problem, material: MaterialModel, k_list,
           reference: np.ndarray | None = None,
           history_budget=DEFAULT_HISTORY_BUDGET):
    """Error-vs-k study against the double-precision reference gradient.

    Returns (rows, reference) where each row is
    (k, rel_mse_single, rel_mse_double).
    """
    if reference is None:
        reference = gradient_reference(problem, material,
                                       history_budget=history_budget).gradient
    rows = []
    for k in k_list:
        errs = []
        for precision in ("single", "double"):
            try:
                res = gradient_superposed(
                    problem, material, SuperpositionConfig(k=k, precision=precision)
                )
                errs.append(rel_mse(res.gradient, reference))
            except SolverInstabilityError:
                errs.append(math.inf)
        rows.append((float(k), errs[0], errs[1]))
    return rows, reference
