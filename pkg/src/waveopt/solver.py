"""Explicit second-order FD propagation for both wave-equation flavors.

The update scheme is time-symmetric: stepping with reversed level order
exactly undoes a forward run (up to floating-point rounding), which is what
the superposed-field gradient relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grids import (
    ACOUSTIC,
    RHO_SCALED,
    ConfigError,
    Grid,
    MaterialModel,
    SensorArray,
    SourceSpec,
    TimeConfig,
    interpolate_material_fields,
)
from .kernels import apply_step

STABILITY_CHECK_INTERVAL = 50
STABILITY_GROWTH_FACTOR = 1e6
DEFAULT_HISTORY_BUDGET = 4 * 1024**3  # bytes


class SolverInstabilityError(RuntimeError):
    """Blow-up or NaN/Inf during time integration (CLI exit code 2)."""

    def __init__(self, step, max_abs, detail=""):
        self.step = step
        self.max_abs = max_abs
        msg = f"unstable field at step {step}: max|u| = {max_abs:g}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


class ResourceBudgetError(RuntimeError):
    """Estimated allocation exceeds the configured budget (CLI exit code 3)."""


def burst_amplitude(t, src: SourceSpec):
    """Sine-burst time signal: psi0 sin(w t) sin^2(w t / (2 n_c)) inside the
    burst window [0, 2 pi n_c / w], zero afterwards."""
    if t < 0 or t > src.duration:
        return 0.0
    w = src.omega
    return src.amplitude * math.sin(w * t) * math.sin(w * t / (2 * src.cycles)) ** 2


def apply_ghost_material(material: MaterialModel):
    """One-cell halo copy of the indicator, ghost values equal to the boundary.

    The solver itself never pads; it clamps index reads, which produces the
    same arithmetic. This padded view exists for inspection and tests.
    """
    return np.pad(material.gamma, 1, mode="edge")


@dataclass
class PreparedMaterial:
    """Stencil coefficient arrays derived from a MaterialModel at a dtype.

    face_weights[a][idx] = 1 / (m_i + m_{i+1}) along axis a, where m is the
    reciprocal of the flux coefficient up to constants: 1/gamma for the
    rho-scaled flavor and the interpolated density for the acoustic one.
    The face value is the harmonic mean of the two nodal coefficients, which
    keeps the effective wave speed bounded and blocks flux through voids.
    """

    material: MaterialModel
    dt: float
    dtype: np.dtype
    coef: np.ndarray          # multiplies the spatial face sum
    face_weights: tuple       # one (n-1)-faces array per axis
    force_coef: np.ndarray    # multiplies the nodal force value

    @property
    def grid(self) -> Grid:
        return self.material.grid


def prepare_material(material: MaterialModel, dt, dtype=np.float64) -> PreparedMaterial:
    dtype = np.dtype(dtype)
    grid = material.grid
    dt = float(dt)
    if material.flavor == RHO_SCALED:
        gamma = np.ascontiguousarray(material.gamma, dtype=dtype)
        m = dtype.type(1.0) / gamma
        r2 = dtype.type((material.c0 * dt / grid.dx) ** 2)
        coef = dtype.type(2.0) * r2 / gamma
        force_coef = dtype.type(dt * dt) / (dtype.type(material.rho0) * gamma)
    else:
        gamma = np.ascontiguousarray(material.gamma, dtype=dtype)
        inv_rho, inv_kappa = interpolate_material_fields(
            material.with_gamma(gamma)
        )
        inv_rho = inv_rho.astype(dtype, copy=False)
        inv_kappa = inv_kappa.astype(dtype, copy=False)
        m = dtype.type(1.0) / inv_rho
        kappa = dtype.type(1.0) / inv_kappa
        s2 = dtype.type((dt / grid.dx) ** 2)
        coef = dtype.type(2.0) * kappa * s2
        force_coef = kappa * dtype.type(dt * dt)
    weights = []
    for axis in range(grid.ndim):
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        weights.append(
            np.ascontiguousarray(dtype.type(1.0) / (m[tuple(lo)] + m[tuple(hi)]))
        )
    return PreparedMaterial(
        material=material, dt=dt, dtype=dtype,
        coef=np.ascontiguousarray(coef),
        face_weights=tuple(weights),
        force_coef=np.ascontiguousarray(force_coef),
    )


@dataclass
class SolverWindow:
    """Three solution levels; advancing swaps references, never copies."""

    u_prev: np.ndarray
    u_cur: np.ndarray
    u_next: np.ndarray
    step: int = 1

    @classmethod
    def zeros(cls, grid: Grid, dtype=np.float64, allocate=np.zeros):
        return cls(
            u_prev=allocate(grid.shape, dtype=dtype),
            u_cur=allocate(grid.shape, dtype=dtype),
            u_next=allocate(grid.shape, dtype=dtype),
        )

    def rotate(self):
        self.u_prev, self.u_cur, self.u_next = self.u_cur, self.u_next, self.u_prev
        self.step += 1

    def swap_direction(self):
        """Exchange the roles of newest/oldest level for reversed stepping."""
        self.u_prev, self.u_cur = self.u_cur, self.u_prev


def add_force(out, prep: PreparedMaterial, force):
    """Apply a force to a freshly stepped level.

    force is None, a dense field, or a (flat_indices, values) pair; nodal
    values are injected directly (Kronecker-delta convention, no cell-volume
    division), scaled by the flavor's force coefficient.
    """
    if force is None:
        return
    if isinstance(force, np.ndarray):
        out += prep.force_coef * force.astype(out.dtype, copy=False)
        return
    idx, values = force
    if len(idx) == 0:
        return
    flat = out.reshape(-1)
    flat[idx] += prep.force_coef.reshape(-1)[idx] * np.asarray(values, dtype=out.dtype)


def step_window(window: SolverWindow, prep: PreparedMaterial, force=None):
    """Compute the next level into window.u_next; caller rotates."""
    apply_step(window.u_prev, window.u_cur, prep.face_weights, prep.coef,
               window.u_next)
    add_force(window.u_next, prep, force)


def check_finite(values, step, scale=0.0):
    m = float(np.max(np.abs(values)))
    if not math.isfinite(m):
        raise SolverInstabilityError(step, m)
    if scale > 0.0 and m > STABILITY_GROWTH_FACTOR * scale:
        raise SolverInstabilityError(step, m, detail=f"exceeds 1e6 x scale {scale:g}")
    return m


def propagate_step(window: SolverWindow, force, material: MaterialModel,
                   dt, dx=None) -> SolverWindow:
    """One explicit update u^{n+1} from (u^{n-1}, u^n); advances the window.

    force may be a dense field, a sparse (flat_indices, values) pair, or
    None. Output NaN/Inf raises SolverInstabilityError.
    """
    if dx is not None and not math.isclose(dx, material.grid.dx):
        raise ConfigError(f"dx {dx} does not match grid spacing {material.grid.dx}")
    prep = prepare_material(material, dt, dtype=window.u_cur.dtype)
    step_window(window, prep, force)
    check_finite(window.u_next, window.step)
    window.rotate()
    return window


def propagate_step_convolutional(window: SolverWindow, force,
                                 material: MaterialModel, dt, dx=None) -> SolverWindow:
    """Stencil update phrased as 3-point correlations (test oracle).

    Independent implementation of propagate_step: face weights and face
    differences are built by running correlation kernels over the material
    and the solution, with clamped ('nearest') boundary handling playing the
    ghost-cell role.
    """
    if dx is not None and not math.isclose(dx, material.grid.dx):
        raise ConfigError(f"dx {dx} does not match grid spacing {material.grid.dx}")
    grid = material.grid
    dtype = window.u_cur.dtype
    u = window.u_cur
    gamma = np.ascontiguousarray(material.gamma, dtype=dtype)
    if material.flavor == RHO_SCALED:
        m = dtype.type(1.0) / gamma
        r2 = dtype.type((material.c0 * dt / grid.dx) ** 2)
        coef = dtype.type(2.0) * r2 / gamma
        force_coef = dtype.type(dt * dt) / (dtype.type(material.rho0) * gamma)
    else:
        inv_rho, inv_kappa = interpolate_material_fields(material.with_gamma(gamma))
        m = dtype.type(1.0) / inv_rho.astype(dtype, copy=False)
        kappa = dtype.type(1.0) / inv_kappa.astype(dtype, copy=False)
        coef = dtype.type(2.0) * kappa * dtype.type((dt / grid.dx) ** 2)
        force_coef = kappa * dtype.type(dt * dt)
    zero, one = dtype.type(0.0), dtype.type(1.0)
    k_sum_hi = np.array([zero, one, one], dtype=dtype)     # m_i + m_{i+1}
    k_sum_lo = np.array([one, one, zero], dtype=dtype)     # m_{i-1} + m_i
    k_diff_hi = np.array([zero, -one, one], dtype=dtype)   # u_{i+1} - u_i
    k_diff_lo = np.array([-one, one, zero], dtype=dtype)   # u_i - u_{i-1}
    corr = lambda a, k, ax: ndimage.correlate1d(a, k, axis=ax, mode="nearest")
    spatial = None
    for axis in range(grid.ndim):
        w_hi = one / corr(m, k_sum_hi, axis)
        w_lo = one / corr(m, k_sum_lo, axis)
        term = corr(u, k_diff_hi, axis) * w_hi
        spatial = term if spatial is None else spatial + term
        spatial = spatial - corr(u, k_diff_lo, axis) * w_lo
    out = window.u_next
    out[...] = u + u - window.u_prev + coef * spatial
    if force is not None:
        if isinstance(force, np.ndarray):
            out += force_coef * force.astype(dtype, copy=False)
        else:
            idx, values = force
            out.reshape(-1)[idx] += (
                force_coef.reshape(-1)[idx] * np.asarray(values, dtype=dtype)
            )
    check_finite(out, window.step)
    window.rotate()
    return window


@dataclass
class ForwardResult:
    window: SolverWindow
    traces: np.ndarray | None
    history: np.ndarray | None
    peak_abs: float


def source_injections(sources, grid: Grid, t):
    idx = np.array([grid.flat_index(s.node) for s in sources], dtype=np.int64)
    values = np.array([burst_amplitude(t, s) for s in sources])
    return idx, values


def injection_scale(sources, prep: PreparedMaterial):
    """Rough per-step displacement scale of the nodal injections."""
    fc = prep.force_coef.reshape(-1)
    scale = 0.0
    for s in sources:
        scale = max(scale, abs(s.amplitude) * float(fc[prep.grid.flat_index(s.node)]))
    return scale


def run_forward(material: MaterialModel, time: TimeConfig, sources,
                sensors: SensorArray | None = None,
                recorder_mode="traces_only",
                history_budget=DEFAULT_HISTORY_BUDGET,
                dtype=np.float64,
                on_step=None) -> ForwardResult:
    """Integrate N steps from homogeneous initial conditions u^0 = u^1 = 0.

    Produces levels u^0..u^N; sensor trace entry j records level u^j, so
    traces have exactly N columns (entry N-1 is the last level whose misfit
    an adjoint source at the interior time centers can still reach).
    recorder_mode='full_history' additionally stores every level (N+1
    snapshots), refusing up front if the estimated footprint exceeds
    history_budget bytes. on_step(n, u_new) is called with each fresh level
    u^{n+1}.
    """
    grid = material.grid
    n_steps = time.n_steps
    for s in sources:
        s.validate_on(grid)
    if sensors is not None:
        sensors.validate_on(grid)
    dtype = np.dtype(dtype)
    prep = prepare_material(material, time.dt, dtype=dtype)

    history = None
    if recorder_mode == "full_history":
        need = (n_steps + 1) * grid.n_nodes * dtype.itemsize
        if need > history_budget:
            raise ResourceBudgetError(
                f"full history needs {need} bytes ({n_steps + 1} levels of "
                f"{grid.n_nodes} nodes) > budget {history_budget}"
            )
        history = np.zeros((n_steps + 1,) + grid.shape, dtype=dtype)
    elif recorder_mode != "traces_only":
        raise ConfigError(f"unknown recorder_mode {recorder_mode!r}")

    sensor_idx = sensors.flat_indices(grid) if sensors is not None else None
    traces = np.zeros((len(sensors), n_steps), dtype=dtype) if sensors is not None else None

    window = SolverWindow.zeros(grid, dtype=dtype)
    scale = injection_scale(sources, prep) * n_steps
    peak = 0.0
    for n in range(1, n_steps):
        if sensor_idx is not None:
            traces[:, n] = window.u_cur.reshape(-1)[sensor_idx]
        force = source_injections(sources, grid, n * time.dt) if sources else None
        step_window(window, prep, force)
        if n % STABILITY_CHECK_INTERVAL == 0 or n == n_steps - 1:
            peak = max(peak, check_finite(window.u_next, n + 1, scale))
        if history is not None:
            history[n + 1] = window.u_next
        if on_step is not None:
            on_step(n, window.u_next)
        window.rotate()
    window.step = n_steps
    if sensors is not None:
        sensors.traces = traces
    return ForwardResult(window=window, traces=traces, history=history, peak_abs=peak)


def run_backward(material: MaterialModel, time: TimeConfig, end_window: SolverWindow,
                 forces_by_step, on_step=None, copy=True) -> SolverWindow:
    """Integrate the scheme with reversed step order from the two end levels.

    end_window carries (u^{N-1}, u^N) as (u_prev, u_cur). forces_by_step(n)
    supplies the center-time force f^n for n = N-1 .. 1 in any of the
    propagate_step force forms. Returns the window with u_cur = u^0. By time
    symmetry this exactly replays a forward run backwards at matching
    precision. on_step(n, u_older) is called with each fresh level u^{n-1}.
    """
    grid = material.grid
    prep = prepare_material(material, time.dt, dtype=end_window.u_cur.dtype)
    if copy:
        window = SolverWindow(
            u_prev=end_window.u_cur.copy(),   # u^N takes the 'two steps back' slot
            u_cur=end_window.u_prev.copy(),   # center starts at u^{N-1}
            u_next=np.empty_like(end_window.u_cur),
        )
    else:
        window = end_window
        window.swap_direction()
    for n in range(time.n_steps - 1, 0, -1):
        step_window(window, prep, forces_by_step(n))
        if n % STABILITY_CHECK_INTERVAL == 0 or n == 1:
            check_finite(window.u_next, n - 1)
        if on_step is not None:
            on_step(n, window.u_next)
        window.rotate()
    window.step = 0
    return window
