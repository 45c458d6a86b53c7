"""Configuration-driven experiment runner.

Subcommands:

* ``stnlmc run``          build -> local solves -> coarse solve -> downscale
                          -> errors, for each requested oversampling layer
* ``stnlmc print-config`` dump a preset as an INI file
* ``stnlmc snapshot``     write one spatial slice as a legacy-VTK file

Presets: ``exp1`` and ``exp2`` (the two moving-channel convergence
experiments), ``manufactured`` (reference-solver convergence study),
``oracle`` (localized-vs-global equivalence study) and ``decay``
(layer-energy decay study).

Config files are INI: sections [experiment], [grid], [field], [channels],
[solver], [output]; each channel is one key whose value is the sextuple
``x0 x1 y0 y1 t0 t1`` followed by the channel permeability. Unknown sections
or keys are rejected with the offending line.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import sys
import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import metrics, nlmc, output
from .grid import SpaceTimeGrid, build_grid, full_region
from .medium import Box, Channel, PermeabilityField, build_pou
from .reference import solve_reference

log = logging.getLogger("stnlmc")

KINDS = ("table", "manufactured", "oracle", "decay")
SOURCES = {}


def _register_source(name):
    def deco(fn):
        SOURCES[name] = fn
        return fn
    return deco


@_register_source("product_xyt")
def source_product_xyt(X, Y, t):
    return X * Y * t


@_register_source("manufactured_sine")
def source_manufactured_sine(X, Y, t):
    return np.sin(np.pi * X) * np.sin(np.pi * Y) * (1.0 + 2.0 * np.pi ** 2 * t)


def manufactured_exact(X, Y, t):
    return t * np.sin(np.pi * X) * np.sin(np.pi * Y)


@dataclass
class ExperimentConfig:
    kind: str = "table"
    preset: str = "custom"
    nx_coarse: int = 8
    ny_coarse: int = 8
    nt_coarse: int = 10
    refine_x: int = 8
    refine_y: int = 8
    refine_t: int = 10
    domain: tuple = (0.0, 1.0, 0.0, 1.0)
    t_final: float = 1.0
    kappa_matrix: float = 1.0
    channels: tuple = ()
    source: str = "product_xyt"
    pou: str = "bilinear"
    pou_freeze: str = "interval"
    theta: float = 0.5
    layers: tuple = (1, 2, 3, 4, 5)
    threads: int = 1
    h1k_include_l2: bool = False
    cache_cap: int = 16
    out_dir: str = "results"
    decay_csv: bool = False
    snapshot_times: tuple = ()
    refine_steps: int = 3
    manufactured_base: int = 16
    decay_blocks: tuple = ((2, 2), (5, 2), (3, 5), (4, 4), (2, 5))
    decay_layers: int = 4

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}; "
                              f"expected one of {sorted(SOURCES)}")
        if self.pou not in ("bilinear", "multiscale"):
            raise ConfigError(f"unknown pou mode {self.pou!r}")
        if self.pou_freeze not in ("interval", "slab"):
            raise ConfigError(f"unknown pou_freeze {self.pou_freeze!r}")
        if not 0.5 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0.5, 1], got {self.theta}")
        if not self.layers or any(l < 0 for l in self.layers):
            raise ConfigError("layers must be non-negative")
        if min(self.nx_coarse, self.ny_coarse, self.nt_coarse,
               self.refine_x, self.refine_y, self.refine_t) < 1:
            raise ConfigError("grid counts and refinements must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    # -- derived builders ------------------------------------------------

    def build_grid(self) -> SpaceTimeGrid:
        return build_grid(self.nx_coarse, self.ny_coarse, self.nt_coarse,
                          self.refine_x, self.refine_y, self.refine_t,
                          self.domain, self.t_final)

    def build_field(self) -> PermeabilityField:
        return PermeabilityField(self.kappa_matrix, self.channels)

    def source_fn(self):
        return SOURCES[self.source]

    def scaled(self, scale: float) -> "ExperimentConfig":
        """Shrink the grid uniformly (channel geometry is kept in physical units)."""
        if scale == 1.0:
            return self
        if scale <= 0:
            raise ConfigError("scale must be positive")

        def s(v):
            return max(1, round(v * scale))

        return replace(self, nx_coarse=s(self.nx_coarse), ny_coarse=s(self.ny_coarse),
                       nt_coarse=s(self.nt_coarse))


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------

def preset_exp1() -> ExperimentConfig:
    channels = (Channel((Box(0.375, 0.6094, 0.50, 0.5156, 0.0, 0.5),
                         Box(0.3906, 0.6250, 0.50, 0.5156, 0.5, 1.0)), 1000.0),)
    return ExperimentConfig(kind="table", preset="exp1", channels=channels)


def preset_exp2() -> ExperimentConfig:
    s1 = tuple(Box(0.09 + 0.01 * k, 0.11 + 0.01 * k, 0.30, 0.70,
                   0.04 * (k - 1), 0.04 * k) for k in range(1, 26))
    s2 = tuple(Box(0.39 + 0.01 * k, 0.79 + 0.01 * k, 0.15, 0.17,
                   0.05 * (k - 1), 0.05 * k) for k in range(1, 21))
    s3 = tuple(Box(0.29 + 0.01 * k, 0.44 + 0.01 * k, 0.19 + 0.01 * k, 0.21 + 0.01 * k,
                   0.04 * (k - 1), 0.04 * k) for k in range(1, 26))
    s4 = tuple(Box(0.59 + 0.01 * k, 0.94 + 0.01 * k, 0.63 + 0.01 * k, 0.65 + 0.01 * k,
                   0.10 * (k - 1), 0.10 * k) for k in range(1, 11))
    channels = tuple(Channel(bs, 1000.0) for bs in (s1, s2, s3, s4))
    return ExperimentConfig(kind="table", preset="exp2",
                            nx_coarse=10, ny_coarse=10, nt_coarse=10,
                            refine_x=10, refine_y=10, refine_t=10,
                            channels=channels)


def preset_manufactured() -> ExperimentConfig:
    return ExperimentConfig(kind="manufactured", preset="manufactured",
                            source="manufactured_sine", layers=(0,))


def preset_oracle() -> ExperimentConfig:
    cfg = preset_exp1()
    return replace(cfg, kind="oracle", preset="oracle",
                   nx_coarse=16, ny_coarse=16, nt_coarse=10,
                   refine_x=4, refine_y=4, refine_t=5, layers=(16,))


def preset_decay() -> ExperimentConfig:
    cfg = preset_exp1()
    return replace(cfg, kind="decay", preset="decay", layers=(4,))


PRESETS = {"exp1": preset_exp1, "exp2": preset_exp2, "manufactured": preset_manufactured,
           "oracle": preset_oracle, "decay": preset_decay}


# --------------------------------------------------------------------------
# INI round trip
# --------------------------------------------------------------------------

_SCHEMA = {
    "experiment": ("kind", "preset"),
    "grid": ("nx_coarse", "ny_coarse", "nt_coarse", "refine_x", "refine_y",
             "refine_t", "domain", "t_final"),
    "field": ("kappa_matrix",),
    "channels": None,  # free-form keys, each one channel
    "solver": ("pou", "pou_freeze", "theta", "layers", "threads",
               "h1k_include_l2", "cache_cap"),
    "output": ("directory", "decay_csv", "snapshot_times"),
    "study": ("refine_steps", "manufactured_base", "decay_layers", "decay_blocks"),
}


def dump_config(cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    cp = configparser.ConfigParser()
    cp["experiment"] = {"kind": cfg.kind, "preset": cfg.preset}
    cp["grid"] = {
        "nx_coarse": str(cfg.nx_coarse), "ny_coarse": str(cfg.ny_coarse),
        "nt_coarse": str(cfg.nt_coarse), "refine_x": str(cfg.refine_x),
        "refine_y": str(cfg.refine_y), "refine_t": str(cfg.refine_t),
        "domain": " ".join(repr(v) for v in cfg.domain),
        "t_final": repr(cfg.t_final),
    }
    cp["field"] = {"kappa_matrix": repr(cfg.kappa_matrix)}
    cp["channels"] = {}
    for ci, ch in enumerate(cfg.channels):
        for bi, b in enumerate(ch.boxes):
            key = f"c{ci:02d}_b{bi:03d}"
            cp["channels"][key] = " ".join(
                repr(v) for v in (b.x0, b.x1, b.y0, b.y1, b.t0, b.t1)) + \
                " " + repr(ch.value)
    cp["solver"] = {
        "pou": cfg.pou, "pou_freeze": cfg.pou_freeze, "theta": repr(cfg.theta),
        "layers": ",".join(str(l) for l in cfg.layers), "threads": str(cfg.threads),
        "h1k_include_l2": str(cfg.h1k_include_l2).lower(),
        "cache_cap": str(cfg.cache_cap),
    }
    cp["output"] = {
        "directory": cfg.out_dir, "decay_csv": str(cfg.decay_csv).lower(),
        "snapshot_times": " ".join(repr(t) for t in cfg.snapshot_times),
    }
    cp["study"] = {
        "refine_steps": str(cfg.refine_steps),
        "manufactured_base": str(cfg.manufactured_base),
        "decay_layers": str(cfg.decay_layers),
        "decay_blocks": ";".join(f"{a} {b}" for a, b in cfg.decay_blocks),
    }
    cp.write(buf)
    return buf.getvalue()


def _find_line(text: str, token: str) -> int:
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith(token):
            return ln
    return 0


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}] "
                              f"(line {_find_line(text, '[' + section + ']')})")
        allowed = _SCHEMA[section]
        if allowed is None:
            continue
        for key in cp[section]:
            if key not in allowed:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}] (line {_find_line(text, key)})")
    cfg = ExperimentConfig()
    g = cp["experiment"] if cp.has_section("experiment") else {}
    kind = g.get("kind", cfg.kind)
    preset = g.get("preset", "custom")
    vals = {}
    if cp.has_section("grid"):
        s = cp["grid"]
        for name in ("nx_coarse", "ny_coarse", "nt_coarse", "refine_x", "refine_y",
                     "refine_t"):
            if name in s:
                vals[name] = _parse_int(s[name], name)
        if "domain" in s:
            parts = s["domain"].split()
            if len(parts) != 4:
                raise ConfigError("domain needs 4 numbers: x0 x1 y0 y1")
            vals["domain"] = tuple(float(p) for p in parts)
        if "t_final" in s:
            vals["t_final"] = float(s["t_final"])
    if cp.has_section("field") and "kappa_matrix" in cp["field"]:
        vals["kappa_matrix"] = float(cp["field"]["kappa_matrix"])
    if cp.has_section("channels"):
        groups: dict[float, list[Box]] = {}
        order: list[float] = []
        for key in cp["channels"]:
            parts = cp["channels"][key].split()
            if len(parts) != 7:
                raise ConfigError(
                    f"channel {key!r} needs 7 numbers 'x0 x1 y0 y1 t0 t1 value' "
                    f"(line {_find_line(text, key)})")
            nums = [float(p) for p in parts]
            box = Box(*nums[:6])
            val = nums[6]
            if val not in groups:
                groups[val] = []
                order.append(val)
            groups[val].append(box)
        vals["channels"] = tuple(Channel(tuple(groups[v]), v) for v in order)
    if cp.has_section("solver"):
        s = cp["solver"]
        for name in ("pou", "pou_freeze"):
            if name in s:
                vals[name] = s[name]
        if "theta" in s:
            vals["theta"] = float(s["theta"])
        if "layers" in s:
            vals["layers"] = parse_layers(s["layers"])
        if "threads" in s:
            vals["threads"] = _parse_int(s["threads"], "threads")
        if "h1k_include_l2" in s:
            vals["h1k_include_l2"] = s.getboolean("h1k_include_l2")
        if "cache_cap" in s:
            vals["cache_cap"] = _parse_int(s["cache_cap"], "cache_cap")
    if cp.has_section("output"):
        s = cp["output"]
        if "directory" in s:
            vals["out_dir"] = s["directory"]
        if "decay_csv" in s:
            vals["decay_csv"] = s.getboolean("decay_csv")
        if "snapshot_times" in s:
            vals["snapshot_times"] = tuple(float(p) for p in s["snapshot_times"].split())
    if cp.has_section("study"):
        s = cp["study"]
        for name in ("refine_steps", "manufactured_base", "decay_layers"):
            if name in s:
                vals[name] = _parse_int(s[name], name)
        if "decay_blocks" in s:
            blocks = []
            for part in s["decay_blocks"].split(";"):
                a, b = part.split()
                blocks.append((int(a), int(b)))
            vals["decay_blocks"] = tuple(blocks)
    return replace(ExperimentConfig(kind=kind, preset=preset), **vals).validate()


def _parse_int(raw, name):
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from exc


def parse_layers(raw: str) -> tuple:
    raw = raw.strip()
    if ":" in raw:
        a, b = raw.split(":")
        return tuple(range(int(a), int(b) + 1))
    return tuple(int(p) for p in raw.split(",") if p)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    reports: list = dc_field(default_factory=list)
    max_constraint_residual: float = 0.0
    artifacts: list = dc_field(default_factory=list)
    extra: dict = dc_field(default_factory=dict)


def _setup(cfg: ExperimentConfig):
    grid = cfg.build_grid()
    field = cfg.build_field()
    pou = build_pou(field, grid, cfg.pou, cfg.pou_freeze)
    t0 = time.perf_counter()
    aux = nlmc.build_aux(field, grid, pou)
    engine = nlmc.Engine(grid, field, pou, aux, cache_cap=cfg.cache_cap)
    log.info("aux basis: %d dofs over %d blocks (%.2fs)", aux.n_dofs,
             grid.block_count, time.perf_counter() - t0)
    return grid, field, pou, aux, engine


def _solve_one_layer(cfg, engine, ell_x, ell_t, reference_vals):
    grid, field, pou = engine.grid, engine.field, engine.pou
    f = cfg.source_fn()
    t0 = time.perf_counter()
    coarse = nlmc.assemble_coarse(engine, f, ell_x, ell_t, threads=cfg.threads)
    t1 = time.perf_counter()
    U = nlmc.solve_coarse(coarse)
    t2 = time.perf_counter()
    u_ms, residual = nlmc.downscale(engine, U, ell_x, ell_t, threads=cfg.threads)
    t3 = time.perf_counter()
    report = metrics.relative_errors(grid, field, pou, reference_vals, u_ms,
                                     ell_x, ell_t, cfg.h1k_include_l2)
    report.timings = {"assemble_s": t1 - t0, "coarse_solve_s": t2 - t1,
                      "local_solve_s": t3 - t2}
    log.info("ell=(%d,%d): rel_l2=%.4f%% rel_h1k=%.4f%% "
             "(assemble %.1fs, coarse %.2fs, downscale %.1fs, residual %.2e)",
             ell_x, ell_t, report.rel_l2_pct, report.rel_h1k_pct,
             t1 - t0, t2 - t1, t3 - t2, residual)
    return report, u_ms, residual, U


def run_table(cfg: ExperimentConfig) -> RunResult:
    import os

    grid, field, pou, aux, engine = _setup(cfg)
    t0 = time.perf_counter()
    ref = solve_reference(grid, field, cfg.source_fn(), cfg.theta)
    log.info("reference solve: %.2fs", time.perf_counter() - t0)
    result = RunResult()
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    last_ums = None
    for ell in cfg.layers:
        report, u_ms, residual, _ = _solve_one_layer(cfg, engine, ell, ell, ref.values)
        result.reports.append(report)
        result.max_constraint_residual = max(result.max_constraint_residual, residual)
        rows.append((ell, ell, report.rel_l2_pct, report.rel_h1k_pct,
                     report.timings["assemble_s"], report.timings["local_solve_s"],
                     report.timings["coarse_solve_s"]))
        last_ums = u_ms
        for t_snap in cfg.snapshot_times:
            path = os.path.join(cfg.out_dir, f"ums_l{ell}_t{t_snap:g}.vtk")
            _write_snapshot(grid, u_ms, t_snap, path, f"u_ms_l{ell}")
            result.artifacts.append(path)
    path = os.path.join(cfg.out_dir, "errors.csv")
    output.write_errors_csv(path, rows)
    result.artifacts.append(path)
    for t_snap in cfg.snapshot_times:
        path = os.path.join(cfg.out_dir, f"reference_t{t_snap:g}.vtk")
        _write_snapshot(grid, ref.values, t_snap, path, "reference")
        result.artifacts.append(path)
    if cfg.decay_csv:
        decay_rows, fits = _decay_study(cfg, engine)
        path = os.path.join(cfg.out_dir, "decay.csv")
        output.write_decay_csv(path, decay_rows)
        result.artifacts.append(path)
        result.extra["decay_fits"] = fits
    result.extra["u_ms"] = last_ums
    result.extra["reference"] = ref.values
    result.extra["engine"] = engine
    return result


def run_manufactured(cfg: ExperimentConfig) -> RunResult:
    import os

    result = RunResult()
    errors = []
    sizes = []
    for r in range(cfg.refine_steps):
        n = cfg.manufactured_base * 2 ** r
        grid = build_grid(n, n, n, 1, 1, 1, cfg.domain, cfg.t_final)
        field = PermeabilityField(1.0)
        pou = build_pou(field, grid, "bilinear")
        ref = solve_reference(grid, field, SOURCES["manufactured_sine"], cfg.theta)
        fs = grid.fine_space
        X, Y = np.meshgrid(np.linspace(fs.x0, fs.x1, fs.nx + 1),
                           np.linspace(fs.y0, fs.y1, fs.ny + 1))
        exact = np.stack([manufactured_exact(X, Y, k * grid.fine_time.dt).ravel()
                          for k in range(grid.fine_time.nt + 1)])
        err = metrics.norm(grid, field, pou, ref.values - exact, "L2")
        errors.append(err)
        sizes.append((fs.hx, grid.fine_time.dt))
        log.info("manufactured n=%d: L2 error %.4e", n, err)
    orders = [float(np.log2(errors[i - 1] / errors[i])) for i in range(1, len(errors))]
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for i, ((h, dt), e) in enumerate(zip(sizes, errors)):
        rows.append((h, dt, e, orders[i - 1] if i else float("nan")))
    path = os.path.join(cfg.out_dir, "manufactured.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("h,dt,l2_error,observed_order\n")
        for h, dt, e, o in rows:
            tail = repr(o) if np.isfinite(o) else ""
            fh.write(f"{h!r},{dt!r},{e!r},{tail}\n")
    result.artifacts.append(path)
    result.extra["errors"] = errors
    result.extra["orders"] = orders
    return result


def run_oracle(cfg: ExperimentConfig) -> RunResult:
    import os

    grid, field, pou, aux, engine = _setup(cfg)
    lx = max(cfg.nx_coarse, cfg.ny_coarse)
    m = cfg.nt_coarse
    f = cfg.source_fn()
    # global route: one full-window causal march per slab horizon
    t0 = time.perf_counter()
    coarse_glo = nlmc.assemble_coarse(engine, f, lx, m, threads=cfg.threads)
    U_glo = nlmc.solve_coarse(coarse_glo, method="monolithic")
    region = full_region(grid)
    ids, _ = aux.region_dofs(region)
    out = engine.forward_window(region, U_glo[ids][:, None], collect="all",
                                check_residual=True)
    fs = grid.fine_space
    u_glo = np.zeros((grid.fine_time.nt + 1, (fs.nx + 1) * (fs.ny + 1)))
    nodes_int = nlmc.RegionNodes(grid, region)
    for s in region.slabs():
        levels = out["levels"][s][:, :, 0]
        base = s * grid.rt
        u_glo[base + 1:base + grid.rt + 1][:, nodes_int.global_ids] = levels
    log.info("global solve: %.2fs", time.perf_counter() - t0)
    # localized route at full oversampling
    report, u_ms, residual, _ = _solve_one_layer(cfg, engine, lx, m, u_glo)
    vdiff = np.sqrt(metrics.region_energy(grid, field, pou, u_ms - u_glo, region, "V"))
    vnorm = np.sqrt(metrics.region_energy(grid, field, pou, u_glo, region, "V"))
    rel = vdiff / vnorm
    result = RunResult()
    result.max_constraint_residual = max(residual, out["residual"])
    result.extra["oracle_rel_v"] = rel
    result.extra["u_glo"] = u_glo
    result.extra["u_ms"] = u_ms
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "oracle.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("n_aux,rel_v_diff\n")
        fh.write(f"{aux.n_dofs},{rel!r}\n")
    result.artifacts.append(path)
    log.info("oracle equivalence: |u_ms - u_glo|_V / |u_glo|_V = %.3e", rel)
    return result


def _decay_study(cfg: ExperimentConfig, engine):
    grid = engine.grid
    lx = cfg.decay_layers
    m = cfg.decay_layers
    rows = []
    fits = {"space": [], "time": []}
    n_mid = grid.coarse_time.nt // 2
    n_last = grid.coarse_time.nt - 1
    for (ccx, ccy) in cfg.decay_blocks:
        i = grid.coarse_space.cell_index(ccx, ccy)
        # spatial profile: the block's own matrix-continuum column
        basis = nlmc.solve_local(engine, (n_mid, i), lx, m)
        own = list(engine.aux.block_dofs(n_mid, i))
        col = int(np.nonzero(basis.aux_ids == own[-1])[0][0])
        energies = nlmc.decay_profile(basis, engine, col, mode="space")
        slope, r2 = nlmc.fit_decay(energies, skip=1)
        fits["space"].append((energies, slope, r2))
        for layer, e in enumerate(energies):
            rows.append(("space", n_mid, i, layer, e, slope, r2))
        # temporal profile: the column born at the window's oldest slab
        basis_t = nlmc.solve_local(engine, (n_last, i), lx, m)
        birth = max(n_last - m, 0)
        old = list(engine.aux.block_dofs(birth, i))
        col_t = int(np.nonzero(basis_t.aux_ids == old[-1])[0][0])
        energies_t = nlmc.decay_profile(basis_t, engine, col_t, mode="time")
        slope_t, r2_t = nlmc.fit_decay(energies_t, skip=1)
        fits["time"].append((energies_t, slope_t, r2_t))
        for layer, e in enumerate(energies_t):
            rows.append(("time", n_last, i, layer, e, slope_t, r2_t))
    return rows, fits


def run_decay(cfg: ExperimentConfig) -> RunResult:
    import os

    grid, field, pou, aux, engine = _setup(cfg)
    rows, fits = _decay_study(cfg, engine)
    result = RunResult()
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "decay.csv")
    output.write_decay_csv(path, rows)
    result.artifacts.append(path)
    result.extra["decay_fits"] = fits
    return result


RUNNERS = {"table": run_table, "manufactured": run_manufactured,
           "oracle": run_oracle, "decay": run_decay}


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    cfg.validate()
    return RUNNERS[cfg.kind](cfg)


# --------------------------------------------------------------------------
# snapshots
# --------------------------------------------------------------------------

def nearest_level(grid: SpaceTimeGrid, t: float) -> int:
    level = int(round(t / grid.fine_time.dt))
    return min(max(level, 0), grid.fine_time.nt)


def _write_snapshot(grid: SpaceTimeGrid, values: np.ndarray, t: float,
                    path: str, name: str):
    fs = grid.fine_space
    level = nearest_level(grid, t)
    slice_2d = values[level].reshape(fs.ny + 1, fs.nx + 1)
    output.write_vtk_structured_points(path, name, slice_2d,
                                       origin=(fs.x0, fs.y0),
                                       spacing=(fs.hx, fs.hy))


def snapshot(cfg: ExperimentConfig, t: float, path: str, which: str = "ms",
             ell: int | None = None) -> str:
    """Compute and write one spatial slice at the fine level nearest to t."""
    if not 0.0 <= t <= cfg.t_final:
        raise ConfigError(f"snapshot time {t} outside [0, {cfg.t_final}]")
    grid, field, pou, aux, engine = _setup(cfg)
    if which == "reference":
        ref = solve_reference(grid, field, cfg.source_fn(), cfg.theta)
        values = ref.values
        name = "reference"
    elif which == "ms":
        ell = ell if ell is not None else max(cfg.layers)
        coarse = nlmc.assemble_coarse(engine, cfg.source_fn(), ell, ell,
                                      threads=cfg.threads)
        U = nlmc.solve_coarse(coarse)
        values, _ = nlmc.downscale(engine, U, ell, ell, threads=cfg.threads)
        name = f"u_ms_l{ell}"
    else:
        raise ConfigError(f"unknown snapshot source {which!r}")
    _write_snapshot(grid, values, t, path, name)
    return path


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("--preset and --config are mutually exclusive")
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    elif args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; "
                              f"expected one of {sorted(PRESETS)}")
        cfg = PRESETS[args.preset]()
    else:
        raise ConfigError("one of --preset or --config is required")
    overrides = {}
    if getattr(args, "layers", None):
        overrides["layers"] = parse_layers(args.layers)
    if getattr(args, "theta", None) is not None:
        overrides["theta"] = args.theta
    if getattr(args, "pou", None):
        overrides["pou"] = args.pou
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if overrides:
        cfg = replace(cfg, **overrides)
    if getattr(args, "scale", None) is not None:
        cfg = cfg.scaled(args.scale)
    return cfg.validate()


def _add_common(p):
    p.add_argument("--preset", help="built-in experiment preset")
    p.add_argument("--config", help="INI config file path")
    p.add_argument("--layers", help="oversampling layers, 'a:b' or comma list")
    p.add_argument("--theta", type=float, help="time-stepping theta in [0.5, 1]")
    p.add_argument("--pou", choices=("bilinear", "multiscale"),
                   help="partition-of-unity mode")
    p.add_argument("--threads", type=int, help="worker processes for local solves")
    p.add_argument("--out", help="output directory")
    p.add_argument("--scale", type=float, help="uniform grid shrink factor")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stnlmc",
        description="Space-time non-local multi-continua solver suite")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment")
    _add_common(p_run)
    p_print = sub.add_parser("print-config", help="dump a preset as INI")
    p_print.add_argument("--preset", required=True)
    p_snap = sub.add_parser("snapshot", help="write a VTK slice")
    _add_common(p_snap)
    p_snap.add_argument("--time", type=float, required=True)
    p_snap.add_argument("--which", choices=("ms", "reference"), default="ms")
    p_snap.add_argument("--ell", type=int, help="oversampling layers for the ms field")
    p_snap.add_argument("--file", required=True, help="output VTK path")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "print-config":
            if args.preset not in PRESETS:
                raise ConfigError(f"unknown preset {args.preset!r}")
            sys.stdout.write(dump_config(PRESETS[args.preset]()))
            return 0
        if args.command == "run":
            cfg = _load_config(args)
            result = run_experiment(cfg)
            for a in result.artifacts:
                log.info("wrote %s", a)
            return 0
        if args.command == "snapshot":
            cfg = _load_config(args)
            path = snapshot(cfg, args.time, args.file, args.which, args.ell)
            log.info("wrote %s", path)
            return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, MemoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
