"""Config-driven benchmark harness: seeded Monte Carlo filtering experiments.

An experiment is described by a small YAML mapping (model, time grid,
estimators, transition scheme, Monte Carlo settings, output directory).  Each
run simulates one trajectory, applies every configured estimator to the same
measurement record, scores it against the designated truth, and emits
machine-readable results:

* one ``run_XXXX.csv`` per run plus a merged ``results.csv`` (schema comment
  ``# bench-csv v1``), byte-identical across repeat executions of the same
  seeded config -- including multi-process execution, because every run owns
  an RNG stream derived from ``(base_seed, run_index)`` alone;
* ``summary.json`` with error/NLL quantiles, exact divergence counts, and
  wall-clock statistics (timings live only in the JSON so the CSVs stay
  deterministic).

The truth an estimator is scored against depends on the model: the exact
Kalman filter for the linear OU model (absolute filtering-mean error), a
dense-grid reference for other scalar models (sup over a fixed window of the
characteristic-function error), and the simulated state for multivariate
models (L1 projection error of the filtering mean).
"""
from __future__ import annotations

import inspect
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml
from scipy.optimize import minimize

from .baselines import (
    bootstrap_pf,
    build_grid_kernel,
    gauss_hermite_filter,
    grid_reference_filter,
    kalman_ou,
)
from .errors import ConfigError, NumericalDivergence
from .filtering import NLL_SENTINEL, FilterConfig, nll_objective, run_moment_filter
from .models import (
    MODEL_BUILDERS,
    char_fn_from_moments,
    char_fn_from_samples,
    char_fn_gaussian,
    char_fn_window,
    make_model,
    simulate,
)
from .transition import TransitionConfig

CSV_SCHEMA = "bench-csv v1"
ESTIMATE_CSV_SCHEMA = "estimate-csv v1"

_ESTIMATOR_NAMES = ("mf", "kalman", "ghf", "pf", "grid")
_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator entry after expansion (an `mf` entry with several orders
    becomes one spec per order)."""

    name: str
    options: Mapping[str, Any] = field(default_factory=dict)

    @property
    def variant(self) -> str:
        if self.name == "mf":
            return f"N={self.options['order']}"
        if self.name == "ghf":
            return f"order={self.options['order']}"
        if self.name == "pf":
            return f"particles={self.options['particles']}"
        return ""

    @property
    def label(self) -> str:
        return f"{self.name} {self.variant}".strip()


@dataclass(frozen=True)
class EstimateSpec:
    parameters: tuple[str, ...]
    order: int = 7
    start: float = 0.1
    maxiter: int | None = None
    xatol: float = 1e-3
    fatol: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    model_params: Mapping[str, Any]
    t0: float
    dt: float
    steps: int
    sim_substeps: int
    estimators: tuple[EstimatorSpec, ...]
    scheme: str
    tme_order: int
    derivative_mode: str
    runs: int
    base_seed: int
    repair: str
    truth: str
    out_dir: str | None
    formats: tuple[str, ...]
    estimate: EstimateSpec | None

    def transition_config(self) -> TransitionConfig:
        return TransitionConfig(
            scheme=self.scheme,
            tme_order=self.tme_order,
            derivative_mode=self.derivative_mode,
        )

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(1, self.steps + 1)


def _require_mapping(value, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    return dict(value)


def _only_keys(data: Mapping, allowed: set, where: str) -> None:
    extra = set(data) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def _expand_estimators(raw, d: int, model_name: str) -> tuple[EstimatorSpec, ...]:
    if not isinstance(raw, (list, tuple)) or not raw:
        raise ConfigError("estimators must be a non-empty list")
    atoms = []
    for entry in raw:
        entry = _require_mapping(entry, "estimator entry")
        name = entry.pop("name", None)
        if name not in _ESTIMATOR_NAMES:
            raise ConfigError(
                f"estimator name must be one of {_ESTIMATOR_NAMES}, got {name!r}"
            )
        if name == "mf":
            _only_keys(entry, {"orders"}, "mf estimator")
            orders = entry.get("orders")
            if not isinstance(orders, (list, tuple)) or not orders:
                raise ConfigError("mf estimator needs a non-empty 'orders' list")
            for order in orders:
                if int(order) < 1:
                    raise ConfigError("mf orders must be >= 1")
                atoms.append(EstimatorSpec("mf", {"order": int(order)}))
        elif name == "kalman":
            _only_keys(entry, set(), "kalman estimator")
            if model_name != "ou":
                raise ConfigError("the kalman estimator applies only to the ou model")
            atoms.append(EstimatorSpec("kalman", {}))
        elif name == "ghf":
            _only_keys(entry, {"order"}, "ghf estimator")
            order = int(entry.get("order", 11))
            if order < 1:
                raise ConfigError("ghf order must be >= 1")
            atoms.append(EstimatorSpec("ghf", {"order": order}))
        elif name == "pf":
            _only_keys(entry, {"particles", "substeps"}, "pf estimator")
            particles = int(entry.get("particles", 1000))
            if particles < 1:
                raise ConfigError("pf particles must be >= 1")
            atoms.append(
                EstimatorSpec(
                    "pf",
                    {"particles": particles, "substeps": int(entry.get("substeps", 1))},
                )
            )
        else:  # grid
            _only_keys(entry, {"lo", "hi", "n", "substeps"}, "grid estimator")
            if d != 1:
                raise ConfigError("the grid estimator applies only to 1-d models")
            atoms.append(
                EstimatorSpec(
                    "grid",
                    {
                        "lo": float(entry.get("lo", -8.0)),
                        "hi": float(entry.get("hi", 8.0)),
                        "n": int(entry.get("n", 2000)),
                        "substeps": int(entry.get("substeps", 1)),
                    },
                )
            )
    labels = [a.label for a in atoms]
    if len(labels) != len(set(labels)):
        raise ConfigError(f"duplicate estimator entries: {labels}")
    return tuple(atoms)


def config_from_mapping(data: Mapping) -> ExperimentConfig:
    """Validate a parsed config mapping; raises ConfigError on any problem."""
    data = _require_mapping(data, "config")
    _only_keys(
        data,
        {"model", "times", "estimators", "transition", "mc", "repair", "truth",
         "output", "estimate"},
        "config",
    )

    model_block = _require_mapping(data.get("model"), "model")
    _only_keys(model_block, {"name", "params"}, "model")
    model_name = model_block.get("name")
    if model_name not in MODEL_BUILDERS:
        raise ConfigError(
            f"model name must be one of {sorted(MODEL_BUILDERS)}, got {model_name!r}"
        )
    model_params = _require_mapping(model_block.get("params"), "model.params")
    try:
        model = make_model(model_name, **model_params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model params: {exc}") from exc
    d = model.sde.d

    times_block = _require_mapping(data.get("times"), "times")
    _only_keys(times_block, {"t0", "dt", "steps", "substeps"}, "times")
    t0 = float(times_block.get("t0", 0.0))
    dt = float(times_block.get("dt", model.dt))
    steps = int(times_block.get("steps", 0))
    sim_substeps = int(times_block.get("substeps", 10))
    if not dt > 0:
        raise ConfigError("times.dt must be > 0")
    if steps < 1:
        raise ConfigError("times.steps must be >= 1")
    if sim_substeps < 1:
        raise ConfigError("times.substeps must be >= 1")

    if "estimators" not in data and bool(data.get("estimate")):
        estimators: tuple[EstimatorSpec, ...] = ()  # estimation-only config
    else:
        estimators = _expand_estimators(data.get("estimators"), d, model_name)

    trans_block = _require_mapping(data.get("transition"), "transition")
    _only_keys(trans_block, {"scheme", "order", "derivative_mode"}, "transition")
    scheme = trans_block.get("scheme", "tme")
    tme_order = int(trans_block.get("order", 3))
    derivative_mode = trans_block.get("derivative_mode", "analytic")

    mc_block = _require_mapping(data.get("mc"), "mc")
    _only_keys(mc_block, {"runs", "base_seed"}, "mc")
    runs = int(mc_block.get("runs", 1))
    base_seed = int(mc_block.get("base_seed", 0))
    if runs < 1:
        raise ConfigError("mc.runs must be >= 1")

    repair = data.get("repair", "none")
    if repair not in ("none", "clip"):
        raise ConfigError(f"repair must be 'none' or 'clip', got {repair!r}")

    truth = data.get("truth", "auto")
    if truth == "auto":
        truth = "kalman" if model_name == "ou" else ("grid" if d == 1 else "state")
    if truth not in ("kalman", "grid", "state"):
        raise ConfigError(f"truth must be auto/kalman/grid/state, got {truth!r}")
    if truth == "kalman" and model_name != "ou":
        raise ConfigError("truth 'kalman' applies only to the ou model")
    if truth == "grid" and d != 1:
        raise ConfigError("truth 'grid' applies only to 1-d models")

    out_block = _require_mapping(data.get("output"), "output")
    _only_keys(out_block, {"directory", "formats"}, "output")
    out_dir = out_block.get("directory")
    formats = tuple(out_block.get("formats", ["csv", "json"]))
    if not set(formats) <= {"csv", "json"}:
        raise ConfigError(f"output.formats entries must be csv/json, got {formats}")

    estimate = None
    if "estimate" in data and data["estimate"] is not None:
        est_block = _require_mapping(data["estimate"], "estimate")
        _only_keys(
            est_block,
            {"parameters", "order", "start", "maxiter", "xatol", "fatol"},
            "estimate",
        )
        params = est_block.get("parameters")
        if not isinstance(params, (list, tuple)) or not params:
            raise ConfigError("estimate.parameters must be a non-empty list")
        builder_args = set(inspect.signature(MODEL_BUILDERS[model_name]).parameters)
        for p in params:
            if p not in builder_args:
                raise ConfigError(
                    f"estimate parameter {p!r} is not a parameter of model "
                    f"{model_name!r} (expected one of {sorted(builder_args)})"
                )
        start = float(est_block.get("start", 0.1))
        if not start > 0:
            raise ConfigError("estimate.start must be > 0")
        maxiter = est_block.get("maxiter")
        estimate = EstimateSpec(
            parameters=tuple(str(p) for p in params),
            order=int(est_block.get("order", 7)),
            start=start,
            maxiter=None if maxiter is None else int(maxiter),
            xatol=float(est_block.get("xatol", 1e-3)),
            fatol=float(est_block.get("fatol", 1e-3)),
        )

    try:
        transition = TransitionConfig(
            scheme=scheme, tme_order=tme_order, derivative_mode=derivative_mode
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return ExperimentConfig(
        model=model_name,
        model_params=model_params,
        t0=t0,
        dt=dt,
        steps=steps,
        sim_substeps=sim_substeps,
        estimators=estimators,
        scheme=transition.scheme,
        tme_order=transition.tme_order,
        derivative_mode=transition.derivative_mode,
        runs=runs,
        base_seed=base_seed,
        repair=repair,
        truth=truth,
        out_dir=out_dir,
        formats=formats,
        estimate=estimate,
    )


def load_config(
    path,
    seed: int | None = None,
    out_dir: str | None = None,
) -> ExperimentConfig:
    """Parse a YAML experiment config; optional CLI overrides for seed/output."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    config = config_from_mapping(data)
    if seed is not None:
        config = replace(config, base_seed=int(seed))
    if out_dir is not None:
        config = replace(config, out_dir=str(out_dir))
    return config


# ------------------------------------------------------------------ single run


@dataclass(frozen=True)
class EstimatorRun:
    """Everything one estimator produced on one run, padded to T steps."""

    estimator: str
    variant: str
    means: np.ndarray  # (T, d), NaN at/after a divergence
    variances: np.ndarray  # (T, d)
    nll_increments: np.ndarray  # (T,)
    nll: float
    diverged_at: int | None
    reason: str
    wall_clock: float
    errors: np.ndarray  # (T,) per-step error against the designated truth

    @property
    def label(self) -> str:
        return f"{self.estimator} {self.variant}".strip()


@dataclass(frozen=True)
class RunResult:
    run_index: int
    estimator_runs: tuple[EstimatorRun, ...]
    simulation_error: str | None = None


def _rng_for(config: ExperimentConfig, run_index: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((config.base_seed, run_index, slot))
    )


def _pad(rows: np.ndarray, T: int) -> np.ndarray:
    if rows.shape[0] == T:
        return rows
    out = np.full((T,) + rows.shape[1:], np.nan)
    out[: rows.shape[0]] = rows
    return out


def _run_mf(spec, model, ys, times, config):
    order = spec.options["order"]
    fcfg = FilterConfig(
        transition=config.transition_config(), repair=config.repair, t0=config.t0
    )
    M0 = model.init_moments(order)
    start = time.perf_counter()
    traj = run_moment_filter(model.sde, model.meas, ys, times, M0, fcfg)
    wall = time.perf_counter() - start
    T = times.shape[0]
    reason = ""
    if traj.diverged:
        reason = traj.steps[-1].reason
    run = EstimatorRun(
        estimator="mf",
        variant=spec.variant,
        means=_pad(traj.means(), T),
        variances=_pad(traj.variances(), T),
        nll_increments=_pad(traj.nll_increments(), T),
        nll=traj.nll,
        diverged_at=traj.diverged_at,
        reason=reason,
        wall_clock=wall,
        errors=np.full(T, np.nan),
    )
    return run, ("moments", traj)


def _run_kalman(spec, model, ys, times, config):
    p = model.params
    start = time.perf_counter()
    res = kalman_ou(p["ell"], p["sigma"], config.dt, ys, p.get("noise_var", 1.0))
    wall = time.perf_counter() - start
    S = res.predicted_variances + p.get("noise_var", 1.0)
    resid = np.asarray(ys, dtype=float) - res.predicted_means
    incs = 0.5 * (_LOG_2PI + np.log(S) + resid**2 / S)
    run = EstimatorRun(
        estimator="kalman",
        variant="",
        means=res.means[:, None],
        variances=res.variances[:, None],
        nll_increments=incs,
        nll=res.nll,
        diverged_at=None,
        reason="",
        wall_clock=wall,
        errors=np.full(times.shape[0], np.nan),
    )
    return run, ("gaussian", res.means[:, None], res.variances[:, None])


def _run_ghf(spec, model, ys, times, config):
    start = time.perf_counter()
    traj = gauss_hermite_filter(
        model.sde,
        model.meas,
        ys,
        times,
        model.init_mean,
        model.init_cov,
        gh_order=spec.options["order"],
        transition=config.transition_config(),
        t0=config.t0,
    )
    wall = time.perf_counter() - start
    variances = traj.covariances.diagonal(axis1=1, axis2=2)
    run = EstimatorRun(
        estimator="ghf",
        variant=spec.variant,
        means=traj.means,
        variances=variances,
        nll_increments=traj.nll_increments,
        nll=traj.nll,
        diverged_at=traj.diverged_at,
        reason="covariance not positive definite" if traj.diverged else "",
        wall_clock=wall,
        errors=np.full(times.shape[0], np.nan),
    )
    return run, ("gaussian", traj.means, variances)


def _run_pf(spec, model, ys, times, config, rng):
    start = time.perf_counter()
    traj = bootstrap_pf(
        model.sde,
        model.meas,
        ys,
        times,
        spec.options["particles"],
        rng,
        model.init_sampler,
        t0=config.t0,
        substeps=spec.options["substeps"],
        store_particles=True,
    )
    wall = time.perf_counter() - start
    T = times.shape[0]
    K = traj.diverged_at - 1 if traj.diverged else T
    variances = np.full((T, model.sde.d), np.nan)
    variances[:K] = (
        np.einsum("tn,tnd->td", traj.weights[:K], traj.particles[:K] ** 2)
        - traj.means[:K] ** 2
    )
    run = EstimatorRun(
        estimator="pf",
        variant=spec.variant,
        means=traj.means,
        variances=variances,
        nll_increments=traj.nll_increments,
        nll=traj.nll,
        diverged_at=traj.diverged_at,
        reason="all particle weights vanished" if traj.diverged else "",
        wall_clock=wall,
        errors=np.full(T, np.nan),
    )
    return run, ("samples", traj.particles, traj.weights, K)


def _run_grid(spec, model, ys, times, config, kernel):
    opts = spec.options
    start = time.perf_counter()
    traj = grid_reference_filter(
        model.sde,
        model.meas,
        ys,
        times,
        model.init_pdf,
        lo=opts["lo"],
        hi=opts["hi"],
        n=opts["n"],
        transition=config.transition_config(),
        t0=config.t0,
        substeps=opts["substeps"],
        kernel=kernel,
    )
    wall = time.perf_counter() - start
    tw = traj.trapezoid_weights
    mass = traj.densities @ tw
    means = (traj.densities * tw[None, :]) @ traj.grid / mass
    second = (traj.densities * tw[None, :]) @ traj.grid**2 / mass
    run = EstimatorRun(
        estimator="grid",
        variant="",
        means=means[:, None],
        variances=(second - means**2)[:, None],
        nll_increments=traj.nll_increments,
        nll=traj.nll,
        diverged_at=None,
        reason="",
        wall_clock=wall,
        errors=np.full(times.shape[0], np.nan),
    )
    return run, ("grid", traj)


_GRID_DEFAULTS = {"lo": -8.0, "hi": 8.0, "n": 2000, "substeps": 1}


def _grid_options(config: ExperimentConfig) -> dict:
    for spec in config.estimators:
        if spec.name == "grid":
            return dict(spec.options)
    return dict(_GRID_DEFAULTS)


def _char_fn_matrix(payload, z, T) -> np.ndarray:
    """(T, len(z)) characteristic-function values, NaN rows where absent."""
    phi = np.full((T, z.shape[0]), np.nan, dtype=complex)
    kind = payload[0]
    if kind == "moments":
        traj = payload[1]
        for i, s in enumerate(traj.steps):
            if s.updated is not None:
                phi[i] = char_fn_from_moments(s.updated, z)
    elif kind == "gaussian":
        means, variances = payload[1], payload[2]
        for i in range(T):
            if np.isfinite(means[i, 0]) and np.isfinite(variances[i, 0]):
                phi[i] = char_fn_gaussian(means[i, 0], variances[i, 0], z)
    elif kind == "samples":
        particles, weights, K = payload[1], payload[2], payload[3]
        for i in range(K):
            phi[i] = char_fn_from_samples(particles[i, :, 0], z, weights=weights[i])
    elif kind == "grid":
        traj = payload[1]
        tw = traj.trapezoid_weights
        basis = np.exp(1j * traj.grid[:, None] * z[None, :])
        phi = (traj.densities * tw[None, :]) @ basis
    return phi


def run_single(config: ExperimentConfig, run_index: int) -> RunResult:
    """Simulate one trajectory and apply every configured estimator to it."""
    model = make_model(config.model, **dict(config.model_params))
    times = config.times()
    T = times.shape[0]
    d = model.sde.d
    try:
        states, ys = simulate(
            model, times, _rng_for(config, run_index, 0), substeps=config.sim_substeps
        )
    except NumericalDivergence as exc:
        return RunResult(run_index, (), simulation_error=exc.reason)

    grid_kernel = None
    if any(spec.name == "grid" for spec in config.estimators) or config.truth == "grid":
        opts = _grid_options(config)
        grid = np.linspace(opts["lo"], opts["hi"], opts["n"])
        grid_kernel = build_grid_kernel(
            model.sde, config.dt / opts["substeps"], grid, config.transition_config()
        )

    runs = []
    payloads = []
    grid_payload = None
    for slot, spec in enumerate(config.estimators, start=1):
        if spec.name == "mf":
            run, payload = _run_mf(spec, model, ys, times, config)
        elif spec.name == "kalman":
            run, payload = _run_kalman(spec, model, ys, times, config)
        elif spec.name == "ghf":
            run, payload = _run_ghf(spec, model, ys, times, config)
        elif spec.name == "pf":
            run, payload = _run_pf(
                spec, model, ys, times, config, _rng_for(config, run_index, slot)
            )
        else:
            run, payload = _run_grid(spec, model, ys, times, config, grid_kernel)
            grid_payload = payload
        runs.append(run)
        payloads.append(payload)

    # score each estimator against the designated truth (untimed)
    if config.truth == "kalman":
        p = model.params
        truth = kalman_ou(p["ell"], p["sigma"], config.dt, ys, p.get("noise_var", 1.0))
        errors = [np.abs(run.means[:, 0] - truth.means) for run in runs]
    elif config.truth == "grid":
        if grid_payload is None:
            opts = _grid_options(config)
            traj = grid_reference_filter(
                model.sde, model.meas, ys, times, model.init_pdf,
                lo=opts["lo"], hi=opts["hi"], n=opts["n"],
                transition=config.transition_config(), t0=config.t0,
                substeps=opts["substeps"], kernel=grid_kernel,
            )
            grid_payload = ("grid", traj)
        z = char_fn_window()
        phi_truth = _char_fn_matrix(grid_payload, z, T)
        errors = [
            np.abs(_char_fn_matrix(payload, z, T) - phi_truth).max(axis=1)
            for payload in payloads
        ]
    else:  # state
        errors = [np.abs(states - run.means).sum(axis=1) for run in runs]

    scored = tuple(
        replace(run, errors=err) for run, err in zip(runs, errors)
    )
    return RunResult(run_index, scored)


# -------------------------------------------------------------------- outputs


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return repr(x) if math.isfinite(x) else ""


def csv_header(d: int) -> str:
    cols = ["run", "estimator", "variant", "k", "t", "diverged", "nll_increment"]
    cols += [f"mean_{i + 1}" for i in range(d)]
    cols += [f"var_{i + 1}" for i in range(d)]
    cols.append("error")
    return ",".join(cols)


def _csv_rows(result: RunResult, times: np.ndarray, d: int) -> list[str]:
    rows = []
    for er in result.estimator_runs:
        last = er.diverged_at if er.diverged_at is not None else times.shape[0]
        for k in range(1, last + 1):
            i = k - 1
            cells = [
                str(result.run_index),
                er.estimator,
                er.variant,
                str(k),
                repr(float(times[i])),
                "1" if er.diverged_at == k else "0",
                _fmt(er.nll_increments[i]),
            ]
            cells += [_fmt(er.means[i, j]) for j in range(d)]
            cells += [_fmt(er.variances[i, j]) for j in range(d)]
            cells.append(_fmt(er.errors[i]))
            rows.append(",".join(cells))
    return rows


def run_csv_text(result: RunResult, times: np.ndarray, d: int) -> str:
    lines = [f"# {CSV_SCHEMA}", csv_header(d)]
    lines += _csv_rows(result, times, d)
    return "\n".join(lines) + "\n"


def _quantiles(values: list[float]) -> dict | None:
    if not values:
        return None
    arr = np.asarray(values, dtype=float)
    return {
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "q10": float(np.quantile(arr, 0.10)),
        "q90": float(np.quantile(arr, 0.90)),
    }


def summarize(config: ExperimentConfig, results: list[RunResult]) -> dict:
    """Aggregate per-run results into the summary.json payload."""
    estimators: dict[str, dict] = {}
    for spec in config.estimators:
        estimators[spec.label] = {
            "estimator": spec.name,
            "variant": spec.variant,
            "divergences": 0,
            "divergence_reasons": {},
            "error": [],
            "nll": [],
            "wall_clock": [],
        }
    sim_failures = 0
    for result in results:
        if result.simulation_error is not None:
            sim_failures += 1
            continue
        for er in result.estimator_runs:
            agg = estimators[er.label]
            agg["wall_clock"].append(er.wall_clock)
            if er.diverged_at is not None:
                agg["divergences"] += 1
                reasons = agg["divergence_reasons"]
                reasons[er.reason] = reasons.get(er.reason, 0) + 1
            else:
                scalar = float(np.mean(er.errors))
                if math.isfinite(scalar):
                    agg["error"].append(scalar)
                agg["nll"].append(float(er.nll))

    for label, agg in estimators.items():
        walls = np.asarray(agg.pop("wall_clock"), dtype=float)
        agg["completed_runs"] = len(agg["nll"])
        agg["error"] = _quantiles(agg["error"])
        agg["nll"] = _quantiles(agg["nll"])
        agg["wall_clock_s"] = (
            None
            if walls.size == 0
            else {
                "total": float(walls.sum()),
                "mean": float(walls.mean()),
                "median": float(np.median(walls)),
            }
        )

    return {
        "schema": "bench-summary v1",
        "model": config.model,
        "model_params": dict(config.model_params),
        "truth": config.truth,
        "runs": config.runs,
        "steps": config.steps,
        "dt": config.dt,
        "t0": config.t0,
        "base_seed": config.base_seed,
        "transition": {
            "scheme": config.scheme,
            "order": config.tme_order,
            "derivative_mode": config.derivative_mode,
        },
        "repair": config.repair,
        "simulation_failures": sim_failures,
        "estimators": estimators,
    }


def write_outputs(
    config: ExperimentConfig, results: list[RunResult], summary: dict, out_dir
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    times = config.times()
    d = make_model(config.model, **dict(config.model_params)).sde.d
    if "csv" in config.formats:
        merged = [f"# {CSV_SCHEMA}", csv_header(d)]
        for result in results:
            (out / f"run_{result.run_index:04d}.csv").write_text(
                run_csv_text(result, times, d)
            )
            merged += _csv_rows(result, times, d)
        (out / "results.csv").write_text("\n".join(merged) + "\n")
    if "json" in config.formats:
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")


def _pool_run(args) -> RunResult:
    config, run_index = args
    return run_single(config, run_index)


def run_experiment(
    config: ExperimentConfig, threads: int = 1, out_dir=None
) -> dict:
    """Execute every Monte Carlo run of a config and aggregate the results.

    Returns the summary mapping; also writes CSV/JSON artifacts when the
    config (or the `out_dir` override) names an output directory.
    """
    if not config.estimators:
        raise ConfigError("config has no estimators (estimation-only config?)")
    tasks = [(config, r) for r in range(config.runs)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_pool_run, tasks))
    else:
        results = [run_single(config, r) for r in range(config.runs)]
    results.sort(key=lambda r: r.run_index)
    summary = summarize(config, results)
    target = out_dir if out_dir is not None else config.out_dir
    if target is not None:
        write_outputs(config, results, summary, target)
    return summary


# ------------------------------------------------------------------ estimation


@dataclass(frozen=True)
class EstimateRunResult:
    run_index: int
    estimates: tuple[float, ...]
    nll: float
    n_evaluations: int
    diverged: bool
    wall_clock: float


def _softplus(u: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, u)


def _softplus_inv(p: float) -> float:
    return math.log(math.expm1(p))


def estimate_single(config: ExperimentConfig, run_index: int) -> EstimateRunResult:
    """Simulate one record, then fit the named parameters by derivative-free
    NLL minimization over softplus-transformed (hence positive) values."""
    est = config.estimate
    names = est.parameters
    truth_model = make_model(config.model, **dict(config.model_params))
    times = config.times()
    rng = _rng_for(config, run_index, 0)
    failed = EstimateRunResult(
        run_index, (float("nan"),) * len(names), float("nan"), 0, True, 0.0
    )
    try:
        _, ys = simulate(truth_model, times, rng, substeps=config.sim_substeps)
    except NumericalDivergence:
        return failed
    fcfg = FilterConfig(
        transition=config.transition_config(), repair=config.repair, t0=config.t0
    )

    def objective(u):
        params = dict(config.model_params)
        params.update({nm: float(v) for nm, v in zip(names, _softplus(u))})
        try:
            candidate = make_model(config.model, **params)
            return nll_objective(
                candidate.sde,
                candidate.meas,
                ys,
                times,
                candidate.init_moments(est.order),
                fcfg,
            )
        except (NumericalDivergence, ValueError, FloatingPointError):
            return NLL_SENTINEL

    u0 = np.full(len(names), _softplus_inv(est.start))
    start = time.perf_counter()
    try:
        res = minimize(
            objective,
            u0,
            method="Nelder-Mead",
            options={
                "xatol": est.xatol,
                "fatol": est.fatol,
                "maxiter": est.maxiter,
            },
        )
    except (NumericalDivergence, np.linalg.LinAlgError, FloatingPointError):
        return failed
    wall = time.perf_counter() - start
    estimates = _softplus(np.asarray(res.x, dtype=float))
    diverged = (
        not np.isfinite(estimates).all()
        or not math.isfinite(float(res.fun))
        or float(res.fun) >= NLL_SENTINEL
        or bool((estimates > 10.0).any())
    )
    return EstimateRunResult(
        run_index,
        tuple(float(e) for e in estimates),
        float(res.fun),
        int(res.nfev),
        diverged,
        wall,
    )


def _pool_estimate(args) -> EstimateRunResult:
    config, run_index = args
    return estimate_single(config, run_index)


def estimates_csv_text(config: ExperimentConfig, results) -> str:
    names = config.estimate.parameters
    header = ["run", "diverged", "nll", "n_evaluations"] + list(names)
    lines = [f"# {ESTIMATE_CSV_SCHEMA}", ",".join(header)]
    for r in results:
        cells = [str(r.run_index), "1" if r.diverged else "0", _fmt(r.nll),
                 str(r.n_evaluations)]
        cells += [_fmt(e) for e in r.estimates]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def summarize_estimates(config: ExperimentConfig, results) -> dict:
    names = config.estimate.parameters
    truth = make_model(config.model, **dict(config.model_params)).params
    clean = [r for r in results if not r.diverged]
    medians = {
        nm: (float(np.median([r.estimates[i] for r in clean])) if clean else None)
        for i, nm in enumerate(names)
    }
    walls = np.asarray([r.wall_clock for r in results], dtype=float)
    return {
        "schema": "estimate-summary v1",
        "model": config.model,
        "parameters": list(names),
        "truth": {nm: truth.get(nm) for nm in names},
        "runs": config.runs,
        "steps": config.steps,
        "dt": config.dt,
        "base_seed": config.base_seed,
        "order": config.estimate.order,
        "start": config.estimate.start,
        "median_estimates": medians,
        "divergences": sum(1 for r in results if r.diverged),
        "divergence_rate": sum(1 for r in results if r.diverged) / len(results),
        "wall_clock_s": {
            "total": float(walls.sum()),
            "mean": float(walls.mean()),
            "median": float(np.median(walls)),
        },
    }


def estimate_parameters(
    config: ExperimentConfig, threads: int = 1, out_dir=None
) -> dict:
    """Run the seeded parameter-estimation study described by the config."""
    if config.estimate is None:
        raise ConfigError("config has no 'estimate' block")
    tasks = [(config, r) for r in range(config.runs)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_pool_estimate, tasks))
    else:
        results = [estimate_single(config, r) for r in range(config.runs)]
    results.sort(key=lambda r: r.run_index)
    summary = summarize_estimates(config, results)
    target = out_dir if out_dir is not None else config.out_dir
    if target is not None:
        out = Path(target)
        out.mkdir(parents=True, exist_ok=True)
        if "csv" in config.formats:
            (out / "estimates.csv").write_text(estimates_csv_text(config, results))
        if "json" in config.formats:
            with open(out / "summary.json", "w") as fh:
                json.dump(summary, fh, indent=2)
                fh.write("\n")
    return summary
