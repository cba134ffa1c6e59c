"""Experiment configuration, orchestration and report emission.

Configs are UTF-8 text with one ``section.key = value`` per line; ``#``
starts a comment. Lists are comma separated. Every violation is collected
with its line number before anything runs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import GuardViolation
from .fitting import loglog_fit
from .manybody import DEFAULT_MAX_BYTES, check_memory
from .potential import Profile, ResolutionError, coupling_constant, sample_scaled
from .spectral import Field, Grid

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RateReport",
    "SCHEMA",
    "KINDS",
    "parse_config",
    "load_config",
    "run",
    "sweep",
    "atomic_write",
]

KINDS = ("hartree", "nls", "pair", "manybody", "fock", "sweep", "fit")


class ConfigError(GuardViolation):
    """One or more configuration problems, each tagged with its line."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


# ------------------------------------------------------------------ schema


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _str(s: str) -> str:
    return s


def _ints(s: str) -> list[int]:
    return [int(p) for p in s.split(",") if p.strip()]


def _floats(s: str) -> list[float]:
    return [_float(p) for p in s.split(",") if p.strip()]


def _choice(*opts):
    def parse(s):
        if s not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return s

    parse.__name__ = "choice"
    return parse


# key -> (parser, default, help)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "experiment.kind": (_choice(*KINDS), "hartree", "what to run"),
    "run.seed": (_int, 0, "seed for randomised initial data"),
    "run.workers": (_int, 1, "worker processes for sweeps"),
    "grid.dim": (_int, 1, "spatial dimension (1 or 3)"),
    "grid.M": (_int, 256, "points per axis"),
    "grid.L": (_float, 40.0, "box length"),
    "initial.width": (_float, 1.0, "Gaussian width"),
    "initial.mass": (_float, 1.0, "L2 mass of the initial field"),
    "initial.center": (_float, 0.0, "Gaussian centre (each axis)"),
    "initial.momentum": (_float, 0.0, "plane-wave momentum along the first axis"),
    "initial.chirp": (_float, 0.0, "imaginary linear factor (1 + i c x)"),
    "initial.noise": (_float, 0.0, "relative amplitude of seeded complex noise"),
    "potential.kind": (_choice("bump", "zero"), "bump", "profile kind"),
    "potential.amplitude": (_float, 1.0, "bump amplitude"),
    "potential.radius": (_float, 2.0, "bump radius"),
    "potential.sign": (_choice("attractive", "repulsive"), "attractive", "sign of v"),
    "scaling.N": (_ints, [1], "particle number or list of them"),
    "scaling.beta": (_float, 0.0, "scaling exponent in [0, 1]"),
    "scaling.lambda": (_float, None, "Pickl weight exponent (default: scanned)"),
    "solver.dt": (_float, 1e-3, "time step"),
    "solver.t_end": (_float, 1.0, "final time"),
    "solver.record_every": (_int, 10, "steps between recorded rows"),
    "solver.tolerance": (_float, 1e-5, "Bogoliubov residual tolerance"),
    "solver.min_points": (_int, 8, "grid spacings required across the scaled radius"),
    "solver.max_bytes": (_int, DEFAULT_MAX_BYTES, "memory cap for one N-body tensor"),
    "solver.fit_window": (_floats, None, "decay fit window t0,t1"),
    "solver.n_max": (_int, 12, "Fock particle cutoff"),
    "solver.times": (_floats, None, "Fock sample times (default: t_end)"),
    "solver.leakage": (_float, 1e-4, "Fock cutoff-shell weight threshold"),
    "sweep.target": (_choice("manybody", "fock", "nls"), "manybody", "what a sweep measures"),
    "fit.input": (_str, None, "CSV file for kind=fit"),
    "fit.x": (_str, "x", "x column"),
    "fit.y": (_str, "y", "y column"),
    "fit.min_points": (_int, 3, "points required for a reliable slope"),
    "fit.max_residual": (_float, 0.1, "RMS log residual for a reliable slope"),
    "output.dir": (_str, "mfl-out", "output directory"),
    "output.prefix": (_str, None, "file prefix (default: the kind)"),
    "output.formats": (_str, "csv,json", "csv and/or json"),
}


@dataclass
class ExperimentConfig:
    values: dict[str, Any]
    lines: dict[str, int] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def kind(self) -> str:
        return self.values["experiment.kind"]

    @property
    def N_list(self) -> list[int]:
        return list(self.values["scaling.N"])

    def resolved(self) -> dict[str, Any]:
        """Every key with its effective value (embedded in all reports)."""
        return {k: self.values[k] for k in sorted(self.values)}

    def grid(self) -> Grid:
        return Grid(self["grid.dim"], self["grid.M"], self["grid.L"], lattice=self.kind == "fock" or self._target == "fock")

    @property
    def _target(self) -> str | None:
        return self.values["sweep.target"] if self.kind == "sweep" else None

    def profile(self) -> Profile:
        if self["potential.kind"] == "zero":
            return Profile(kind="zero")
        return Profile(self["potential.amplitude"], self["potential.radius"], self["potential.sign"])

    def initial_field(self) -> Field:
        g = self.grid()
        c = self["initial.center"]
        r2 = sum((x - c) ** 2 for x in g.coords())
        x0 = g.coords()[0]
        w = self["initial.width"]
        u = np.exp(-r2 / (2 * w**2)) * np.exp(1j * self["initial.momentum"] * x0) * (1 + 1j * self["initial.chirp"] * x0)
        if self["initial.noise"]:
            rng = np.random.default_rng(self["run.seed"])
            u = u * (1 + self["initial.noise"] * (rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)))
        u = u * np.sqrt(self["initial.mass"] / (np.sum(np.abs(u) ** 2) * g.cell_volume))
        return Field(g, u)

    def output_path(self, suffix: str) -> Path:
        prefix = self["output.prefix"] or self.kind
        return Path(self["output.dir"]) / f"{prefix}{suffix}"


def _split_line(raw: str):
    text = raw.split("#", 1)[0].strip()
    if not text:
        return None
    if "=" not in text:
        raise ValueError("expected 'section.key = value'")
    key, value = (p.strip() for p in text.split("=", 1))
    return key, value


def parse_config(text: str, overrides: list[str] | tuple = (), kind: str | None = None) -> ExperimentConfig:
    """Parse, fill defaults and validate; raises ConfigError listing all problems."""
    problems: list[str] = []
    raw: dict[str, tuple[str, str]] = {}
    lines = [(f"line {i}", s) for i, s in enumerate(text.splitlines(), 1)]
    lines += [(f"--set {s!r}", s) for s in overrides]
    for where, s in lines:
        try:
            item = _split_line(s)
        except ValueError as e:
            problems.append(f"{where}: {e}")
            continue
        if item is None:
            continue
        key, value = item
        if key not in SCHEMA:
            problems.append(f"{where}: unknown key {key!r}")
            continue
        raw[key] = (value, where)
    if kind is not None:
        raw["experiment.kind"] = (kind, "command line")
    values: dict[str, Any] = {k: v[1] for k, v in SCHEMA.items()}
    where_of: dict[str, str] = {}
    for key, (value, where) in raw.items():
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except ValueError as e:
            problems.append(f"{where}: {key} = {value!r}: type mismatch ({parser.__name__.lstrip('_')}: {e})")
            continue
        where_of[key] = where
    cfg = ExperimentConfig(values, where_of)
    problems += _validate(cfg)  # keys that failed to parse keep their defaults here
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path, overrides=(), kind: str | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides, kind)


def _validate(cfg: ExperimentConfig) -> list[str]:
    """Range checks and pre-flight guards (resolution, memory, horizon, cutoff)."""
    out = []

    def bad(key, msg):
        out.append(f"{cfg.lines.get(key, 'default')}: {key}: {msg}")

    v = cfg.values
    kind = cfg.kind
    if not 0.0 <= v["scaling.beta"] <= 1.0:
        bad("scaling.beta", f"{v['scaling.beta']} out of [0, 1]")
    if v["grid.dim"] not in (1, 3):
        bad("grid.dim", "must be 1 or 3")
    if v["grid.L"] <= 0:
        bad("grid.L", "must be positive")
    if not v["solver.dt"] > 0:
        bad("solver.dt", "must be positive")
    if v["solver.t_end"] < 0:
        bad("solver.t_end", "must be nonnegative")
    elif v["solver.dt"] > 0 and abs(round(v["solver.t_end"] / v["solver.dt"]) * v["solver.dt"] - v["solver.t_end"]) > 1e-9:
        bad("solver.t_end", "must be a multiple of solver.dt")
    if v["solver.record_every"] < 1:
        bad("solver.record_every", "must be >= 1")
    if v["initial.width"] <= 0 or v["initial.mass"] <= 0:
        bad("initial.width", "width and mass must be positive")
    if v["run.workers"] < 1:
        bad("run.workers", "must be >= 1")
    target = v["sweep.target"] if kind == "sweep" else kind
    if kind in ("manybody", "fock", "sweep") and not v["scaling.N"]:
        bad("scaling.N", "empty sweep axis")
    if any(n < 1 for n in v["scaling.N"]):
        bad("scaling.N", "particle numbers must be positive")
    if out:
        return out
    try:
        g = cfg.grid()
    except ValueError as e:
        bad("grid.M", str(e))
        return out
    if kind == "fit":
        if not v["fit.input"]:
            bad("fit.input", "required for kind=fit")
        return out
    if target in ("pair", "manybody", "fock") and v["grid.dim"] != 1:
        bad("grid.dim", f"{target} runs are 1D only")
        return out
    prof = cfg.profile()
    min_points = 0 if target == "fock" else v["solver.min_points"]
    for n in v["scaling.N"] or [1]:
        if kind in ("hartree", "nls", "pair") and n != v["scaling.N"][0]:
            break
        try:
            sample_scaled(prof, n, v["scaling.beta"], g, min_points)
        except ResolutionError as e:
            bad("potential.radius", f"N={n}: {e}")
    if target == "manybody":
        if any(n < 2 or n > 5 for n in v["scaling.N"]):
            bad("scaling.N", "manybody runs need 2 <= N <= 5")
        else:
            try:
                check_memory(v["grid.M"], max(v["scaling.N"]), v["solver.max_bytes"])
            except GuardViolation as e:
                bad("scaling.N", str(e))
    if target == "fock":
        from .fock import MAX_MODES, cutoff_ok

        if v["grid.M"] > MAX_MODES:
            bad("grid.M", f"Fock runs allow at most {MAX_MODES} modes")
        mean = max(v["scaling.N"]) * v["initial.mass"]
        if not cutoff_ok(v["solver.n_max"], mean):
            bad("solver.n_max", f"{v['solver.n_max']} below the Poisson tail rule for mean particle number {mean:g}")
    if kind in ("hartree", "nls") and v["solver.fit_window"] is not None:
        w = v["solver.fit_window"]
        if len(w) != 2 or not 0 < w[0] < w[1] <= v["solver.t_end"]:
            bad("solver.fit_window", "expected t0,t1 with 0 < t0 < t1 <= t_end")
        else:
            from .hartree import wraparound_horizon

            T = wraparound_horizon(cfg.initial_field())
            if w[1] > T:
                bad("solver.fit_window", f"ends at {w[1]:g}, past the wrap-around horizon {T:.4g}")
    return out


# ------------------------------------------------------------------ output


def atomic_write(path: str | Path, data: str | bytes) -> None:
    """Write to a temporary file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) for x in r])
    return buf.getvalue()


def _emit(cfg: ExperimentConfig, summary: dict, header=None, rows=None) -> dict[str, Path]:
    formats = {f.strip() for f in cfg["output.formats"].split(",")}
    written = {}
    summary = dict(summary)
    summary["config"] = cfg.resolved()
    if header is not None and "csv" in formats:
        p = cfg.output_path(".csv")
        atomic_write(p, _csv(header, rows))
        written["csv"] = p
    if "json" in formats:
        p = cfg.output_path(".json")
        atomic_write(p, _json(summary))
        written["json"] = p
    return written


# ------------------------------------------------------------------ reports


@dataclass
class RateReport:
    parameter: str
    params: list
    values: list
    slope: float | None
    intercept: float | None
    residual: float | None
    reliable: bool
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_points(cls, parameter, params, values, min_points=3, max_residual=0.1, warnings=(), extra=None):
        warnings = list(warnings)
        slope = intercept = resid = None
        reliable = False
        positive = [(p, v) for p, v in zip(params, values) if v is not None and v > 0]
        if len(positive) >= 2:
            slope, intercept, resid = loglog_fit(positive)
            reliable = len(positive) >= min_points and resid <= max_residual
            if not reliable:
                warnings.append(
                    f"slope unreliable: {len(positive)} points (need {min_points}), residual {resid:.3g} (limit {max_residual:g})"
                )
        else:
            warnings.append("slope not available: fewer than 2 positive points")
        return cls(parameter, list(params), list(values), slope, intercept, resid, reliable, warnings, dict(extra or {}))

    def as_dict(self) -> dict:
        d = {
            "parameter": self.parameter,
            "params": self.params,
            "values": self.values,
            "slope": self.slope,
            "intercept": self.intercept,
            "residual": self.residual,
            "reliable": self.reliable,
            "warnings": self.warnings,
        }
        d.update(self.extra)
        return d


# ------------------------------------------------------------------ kinds


def _potential(cfg: ExperimentConfig, N: int, min_points=None):
    mp = cfg["solver.min_points"] if min_points is None else min_points
    return sample_scaled(cfg.profile(), N, cfg["scaling.beta"], cfg.grid(), mp)


def _run_hartree(cfg: ExperimentConfig, cubic: bool):
    from .hartree import decay_fit, evolve, is_admissible, strichartz_window_norm, warn_if_large, wraparound_horizon

    phi0 = cfg.initial_field()
    N = cfg.N_list[0]
    if cubic:
        interaction = coupling_constant(cfg.profile(), cfg["grid.dim"])
    else:
        interaction = _potential(cfg, N)
    warnings = []
    if not cfg.profile().is_zero and warn_if_large(phi0, cfg.profile()):
        warnings.append("data size indicator above 1: exploratory run")
    keep = cfg["grid.dim"] == 1
    res = evolve(phi0, interaction, cfg["solver.dt"], cfg["solver.t_end"], cfg["solver.record_every"], keep_fields=keep)
    T = wraparound_horizon(phi0)
    window = cfg["solver.fit_window"]
    if window is None:
        window = (cfg["solver.t_end"] / 4, min(cfg["solver.t_end"], T))
    summary: dict[str, Any] = {"horizon": T if math.isfinite(T) else None, "decay_window": list(window)}
    try:
        slope, _, resid = decay_fit(res.times, res.linf, tuple(window), T)
        summary["decay_exponent"] = slope
        summary["decay_residual"] = resid
    except (ValueError, GuardViolation) as e:
        summary["decay_exponent"] = None
        warnings.append(f"decay fit skipped: {e}")
    d = cfg["grid.dim"]
    q, r = (8.0, 4.0) if d == 1 else (4.0, 3.0)
    assert is_admissible(q, r, d)
    if keep:
        summary["strichartz"] = {"q": q, "r": r, "window": [0.0, cfg["solver.t_end"]], "value": strichartz_window_norm(res, q, r, (0.0, cfg["solver.t_end"]))}
    else:
        summary["strichartz"] = None
        warnings.append("Strichartz window norm computed in 1D only")
    m = np.asarray(res.mass)
    e = np.asarray(res.energy)
    summary["mass_drift"] = float(np.max(np.abs(m - m[0])))
    summary["energy_drift"] = float(np.max(np.abs(e - e[0])) / max(abs(e[0]), 1e-300))
    summary["warnings"] = warnings
    return summary, ["t", "mass", "energy", "linf", "h_half"], list(res.rows())


def _run_pair(cfg: ExperimentConfig):
    from .pairexc import PairIntegrator, bogoliubov_residual, error_term_norms, half_angle, initial_state, pair_norms

    N = cfg.N_list[0]
    v = _potential(cfg, N)
    st = initial_state(cfg.initial_field(), v)
    integ = PairIntegrator(v, cfg["solver.dt"], cfg["solver.tolerance"])
    n_steps = int(round(cfg["solver.t_end"] / cfg["solver.dt"]))
    rows = []

    def record(s):
        ha = half_angle(s.s2, s.p2)
        terms = error_term_norms(s, N, ha.sh)
        n2 = pair_norms(s)
        rows.append((s.t, n2[0], n2[1], bogoliubov_residual(s.s2, s.p2), terms["q1"], terms["qd6"], terms["c1"], terms["l3"]))

    record(st)
    for k in range(1, n_steps + 1):
        st = integ.step(st)
        if k % cfg["solver.record_every"] == 0 or k == n_steps:
            record(st)
    arr = np.array(rows)
    summary = {
        "N": N,
        "max_s2_l2": float(arr[:, 1].max()),
        "max_p2_l2": float(arr[:, 2].max()),
        "max_bog_residual": float(arr[:, 3].max()),
        "final": dict(zip(["t", "s2_l2", "p2_l2", "bog_residual", "q1", "qd6", "c1", "l3"], map(float, arr[-1]))),
    }
    return summary, ["t", "s2_l2", "p2_l2", "bog_residual", "q1", "qd6", "c1", "l3"], rows


def _manybody_point(args):
    from .manybody import rate_fit

    cfg_values, N = args
    cfg = ExperimentConfig(cfg_values)
    rep = rate_fit(
        [N],
        cfg["solver.t_end"],
        cfg["scaling.beta"],
        cfg.initial_field(),
        cfg.profile(),
        dt=cfg["solver.dt"],
        lam=cfg["scaling.lambda"],
        max_bytes=cfg["solver.max_bytes"],
        min_points=cfg["solver.min_points"],
        record_every=cfg["solver.record_every"],
    )
    return rep


def _run_manybody(cfg: ExperimentConfig):
    from .manybody import rate_fit

    rep = rate_fit(
        cfg.N_list,
        cfg["solver.t_end"],
        cfg["scaling.beta"],
        cfg.initial_field(),
        cfg.profile(),
        dt=cfg["solver.dt"],
        lam=cfg["scaling.lambda"],
        max_bytes=cfg["solver.max_bytes"],
        min_points=cfg["solver.min_points"],
        record_every=cfg["solver.record_every"],
    )
    out = rep.as_dict()
    fit = RateReport.from_points("N", rep.N_list, rep.distances, cfg["fit.min_points"], cfg["fit.max_residual"])
    out["slope_reliable"] = fit.reliable
    out["fit_residual"] = fit.residual
    out["notes"] = list(out["notes"]) + fit.warnings
    return out


def _run_fock(cfg: ExperimentConfig):
    from .fock import fock_error_scaling

    times = cfg["solver.times"] or [cfg["solver.t_end"]]
    rep = fock_error_scaling(
        cfg.profile(),
        cfg["scaling.beta"],
        cfg.initial_field(),
        times,
        cfg.N_list,
        cfg["solver.n_max"],
        dt=cfg["solver.dt"],
        leakage_threshold=cfg["solver.leakage"],
    )
    out = rep.as_dict()
    out["distance"] = rep.final
    out["distance_by_time"] = [list(map(float, r)) for r in rep.distances]
    fit = RateReport.from_points("N", rep.N_list, rep.final, cfg["fit.min_points"], cfg["fit.max_residual"])
    out["slope_reliable"] = fit.reliable
    out["notes"] = list(out["notes"]) + fit.warnings
    return out


def _run_fit(cfg: ExperimentConfig):
    path = Path(cfg["fit.input"])
    with path.open(encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    xs, ys = cfg["fit.x"], cfg["fit.y"]
    if not rows or xs not in rows[0] or ys not in rows[0]:
        raise GuardViolation(f"{path} lacks columns {xs!r} and {ys!r}")
    x = [float(r[xs]) for r in rows]
    y = [float(r[ys]) for r in rows]
    rep = RateReport.from_points(xs, x, y, cfg["fit.min_points"], cfg["fit.max_residual"])
    return rep.as_dict()


def sweep(cfg: ExperimentConfig) -> RateReport:
    """One independent run per N, aggregated into a RateReport of the sweep target."""
    Ns = cfg.N_list
    if not Ns:
        raise ConfigError(["scaling.N: empty sweep axis"])
    target = cfg["sweep.target"]
    warnings: list[str] = []
    extra: dict[str, Any] = {"target": target}
    if target == "manybody":
        jobs = [(cfg.values, n) for n in Ns]
        if cfg["run.workers"] > 1:
            with ProcessPoolExecutor(max_workers=cfg["run.workers"]) as pool:
                reps = list(pool.map(_manybody_point, jobs))
        else:
            reps = [_manybody_point(j) for j in jobs]
        values = [r.distances[0] for r in reps]
        extra["alpha"] = [r.alphas[0] for r in reps]
        extra["alpha_lambda"] = [r.alphas_lambda[0] for r in reps]
    elif target == "fock":
        out = _run_fock(cfg)
        values = out["distance"]
        extra["leakage"] = out["leakage"]
        extra["dim_fock"] = out["dim_fock"]
        warnings += out["notes"]
    else:
        from .hartree import hartree_to_nls_distance

        pts = hartree_to_nls_distance(
            cfg.initial_field(), cfg.profile(), cfg["scaling.beta"], Ns, cfg["solver.t_end"], cfg["solver.dt"], cfg["solver.min_points"]
        )
        values = [d for _, d in pts]
    return RateReport.from_points("N", Ns, values, cfg["fit.min_points"], cfg["fit.max_residual"], warnings, extra)


def run(cfg: ExperimentConfig) -> dict[str, Path]:
    """Execute one configured experiment and write its artifacts atomically."""
    kind = cfg.kind
    logger.info("running %s", kind)
    if kind in ("hartree", "nls"):
        summary, header, rows = _run_hartree(cfg, cubic=kind == "nls")
        return _emit(cfg, summary, header, rows)
    if kind == "pair":
        summary, header, rows = _run_pair(cfg)
        return _emit(cfg, summary, header, rows)
    if kind == "manybody":
        return _emit(cfg, _run_manybody(cfg))
    if kind == "fock":
        return _emit(cfg, _run_fock(cfg))
    if kind == "sweep":
        return _emit(cfg, sweep(cfg).as_dict())
    return _emit(cfg, _run_fit(cfg))
