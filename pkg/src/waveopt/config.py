"""TOML run configurations: validation and assembly into problem objects.

Every run resolves to a RunConfig first; commands receive the resolved
config so the metadata record always reflects what actually ran.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import (
    ConfigError,
    Grid,
    MaterialModel,
    SensorArray,
    SourceSpec,
    TimeConfig,
    build_grid,
)
from .fwi import FwiProblem, synthesize_measurements
from .tato import TatoProblem

KINDS = ("fwi", "tato", "forward")


def _need(table, key, section):
    if key not in table:
        raise ConfigError(f"[{section}] is missing required key {key!r}")
    return table[key]


def _table(cfg, name, required=True):
    if name not in cfg:
        if required:
            raise ConfigError(f"config is missing required section [{name}]")
        return {}
    return cfg[name]


@dataclass
class RunConfig:
    """Validated view of one TOML config plus CLI overrides."""

    kind: str
    raw: dict
    grid: Grid
    time: TimeConfig
    method: str = "superposed"
    k: float | str | None = None
    k_start: float = 1e18
    precision: str = "double"
    seed: int = 0
    threads: int = 1
    dump_interval: int = 0
    plots: bool = True

    def resolved(self):
        return {
            "config": self.raw,
            "kind": self.kind,
            "method": self.method,
            "k": self.k,
            "precision": self.precision,
            "seed": self.seed,
            "threads": self.threads,
            "dump_interval": self.dump_interval,
            "plots": self.plots,
        }


def parse_config(cfg: dict, overrides=None) -> RunConfig:
    overrides = overrides or {}
    problem = _table(cfg, "problem")
    kind = _need(problem, "kind", "problem")
    if kind not in KINDS:
        raise ConfigError(f"[problem] kind must be one of {KINDS}, got {kind!r}")

    gtab = _table(cfg, "grid")
    grid = build_grid(_need(gtab, "n", "grid"), _need(gtab, "dx", "grid"))
    ttab = _table(cfg, "time")
    time = TimeConfig(n_steps=_need(ttab, "n_steps", "time"),
                      dt=_need(ttab, "dt", "time"))

    gr = _table(cfg, "gradient", required=False)
    out = _table(cfg, "output", required=False)
    rc = RunConfig(
        kind=kind, raw=cfg, grid=grid, time=time,
        method=gr.get("method", "superposed"),
        k=gr.get("k"),
        k_start=float(gr.get("k_start", 1e18)),
        precision=gr.get("precision", "double"),
        dump_interval=int(out.get("dump_interval", 0)),
        plots=bool(out.get("plots", True)),
    )
    for key, value in overrides.items():
        if value is not None:
            setattr(rc, key, value)
    if rc.method not in ("superposed", "reference"):
        raise ConfigError(f"[gradient] method must be superposed or reference")
    if rc.precision not in ("single", "double"):
        raise ConfigError(f"[gradient] precision must be single or double")
    if isinstance(rc.k, str) and rc.k != "auto":
        raise ConfigError(f"[gradient] k must be a number or 'auto', got {rc.k!r}")
    return rc


def build_material(cfg, grid: Grid, gamma=None) -> MaterialModel:
    mtab = _table(cfg, "material")
    flavor = _need(mtab, "flavor", "material")
    if flavor == "rho_scaled":
        gamma = np.ones(grid.shape) if gamma is None else gamma
        return MaterialModel.rho_scaled(
            gamma, grid, rho0=_need(mtab, "rho0", "material"),
            c0=_need(mtab, "c0", "material"), eps=mtab.get("eps", 1e-5),
        )
    if flavor == "acoustic":
        gamma = np.zeros(grid.shape) if gamma is None else gamma
        return MaterialModel.acoustic(
            gamma, grid,
            rho1=_need(mtab, "rho1", "material"),
            kappa1=_need(mtab, "kappa1", "material"),
            rho2=_need(mtab, "rho2", "material"),
            kappa2=_need(mtab, "kappa2", "material"),
        )
    raise ConfigError(f"[material] flavor must be rho_scaled or acoustic")


def build_sources(cfg):
    sources = cfg.get("sources")
    if not sources:
        raise ConfigError("config needs at least one [[sources]] entry")
    out = []
    for i, s in enumerate(sources):
        out.append(SourceSpec(
            node=_need(s, "node", f"sources[{i}]"),
            amplitude=_need(s, "amplitude", f"sources[{i}]"),
            frequency=_need(s, "frequency", f"sources[{i}]"),
            cycles=s.get("cycles", 2),
        ))
    return out


def build_sensors(cfg, grid: Grid) -> SensorArray | None:
    stab = _table(cfg, "sensors", required=False)
    if not stab:
        return None
    if "nodes" in stab:
        return SensorArray(nodes=[tuple(n) for n in stab["nodes"]])
    if "ring" in stab:
        if grid.ndim != 2:
            raise ConfigError("[sensors] ring generation needs a 2D grid")
        ring = stab["ring"]
        inset = int(ring.get("inset", 3))
        stride = int(ring.get("stride", 4))
        n1, n2 = grid.shape
        lo = inset + stride - 1
        nodes = ([(inset, j) for j in range(lo, n2 - inset, stride)]
                 + [(n1 - 1 - inset, j) for j in range(lo, n2 - inset, stride)]
                 + [(i, inset) for i in range(lo, n1 - inset, stride)]
                 + [(i, n2 - 1 - inset) for i in range(lo, n1 - inset, stride)])
        return SensorArray(nodes=sorted(set(nodes)))
    raise ConfigError("[sensors] needs 'nodes' or 'ring'")


def _mask_from_boxes(boxes, grid: Grid, section):
    mask = np.zeros(grid.shape, dtype=bool)
    for i, box in enumerate(boxes):
        lo = [int(v) for v in _need(box, "lo", f"{section}[{i}]")]
        hi = [int(v) for v in _need(box, "hi", f"{section}[{i}]")]
        if len(lo) != grid.ndim or len(hi) != grid.ndim:
            raise ConfigError(f"[{section}] box dims do not match the grid")
        sl = tuple(slice(l, h + 1) for l, h in zip(lo, hi))
        mask[sl] = True
    return mask


def build_truth_gamma(cfg, grid: Grid, material: MaterialModel):
    """Truth indicator for measurement synthesis: disks/boxes held at eps."""
    ttab = _table(cfg, "truth", required=False)
    gamma = np.ones(grid.shape)
    idx = np.indices(grid.shape)
    for disk in ttab.get("disks", []):
        center = _need(disk, "center", "truth.disks")
        radius = _need(disk, "radius", "truth.disks")
        dist2 = sum((idx[a] - int(center[a])) ** 2 for a in range(grid.ndim))
        gamma[dist2 <= radius**2] = material.eps
    if "boxes" in ttab:
        gamma[_mask_from_boxes(ttab["boxes"], grid, "truth.boxes")] = material.eps
    return gamma


def build_fwi(cfg, rc: RunConfig):
    material = build_material(cfg, rc.grid)
    if material.flavor != "rho_scaled":
        raise ConfigError("fwi runs use the rho_scaled material flavor")
    sensors = build_sensors(cfg, rc.grid)
    if sensors is None:
        raise ConfigError("fwi needs a [sensors] section")
    opt = _table(cfg, "optimizer", required=False)
    problem = FwiProblem(
        grid=rc.grid, time=rc.time, material=material,
        sources=build_sources(cfg), sensors=sensors,
        alpha=float(opt.get("alpha", 0.02)),
        iterations=int(opt.get("iterations", 100)),
        adam_beta1=float(opt.get("beta1", 0.9)),
        adam_beta2=float(opt.get("beta2", 0.999)),
        adam_eps=float(opt.get("eps", 1e-8)),
    )
    ttab = _table(cfg, "truth", required=False)
    truth = material.with_gamma(build_truth_gamma(cfg, rc.grid, material))
    refine = int(ttab.get("refine", 2))
    problem.measured = synthesize_measurements(truth, problem, refine=refine)
    return problem, truth


def build_tato(cfg, rc: RunConfig):
    mtab = _table(cfg, "material")
    if mtab.get("flavor") != "acoustic":
        raise ConfigError("tato runs use the acoustic material flavor")
    rtab = _table(cfg, "region")
    design = _mask_from_boxes(_need(rtab, "design", "region"), rc.grid, "region.design")
    objective = _mask_from_boxes([_need(rtab, "objective", "region")], rc.grid,
                                 "region.objective")
    ftab = _table(cfg, "filter", required=False)
    opt = _table(cfg, "optimizer", required=False)
    sources = build_sources(cfg)
    if len(sources) != 1:
        raise ConfigError("tato runs use exactly one source")
    return TatoProblem(
        grid=rc.grid, time=rc.time, source=sources[0],
        design_mask=design, objective_mask=objective,
        rho1=_need(mtab, "rho1", "material"), kappa1=_need(mtab, "kappa1", "material"),
        rho2=_need(mtab, "rho2", "material"), kappa2=_need(mtab, "kappa2", "material"),
        r_f=float(ftab.get("radius", 1.5)), eta=float(ftab.get("eta", 0.5)),
        mode=rtab.get("mode", "suppress"),
        alpha=float(opt.get("alpha", 0.1)),
        iterations=int(opt.get("iterations", 150)),
        adam_beta1=float(opt.get("beta1", 0.9)),
        adam_beta2=float(opt.get("beta2", 0.999)),
        adam_eps=float(opt.get("eps", 1e-8)),
    )
