"""Experiment configuration, seeded data generation, run orchestration and
file formats (JSON config, dataset CSV, run CSV, SVG plots)."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .estimator import MheConfig, MheEstimator, StateBox, run_estimator
from .hankel import OfflineDataset, check_consistency, generate_pe_input, make_dataset
from .lti import LtiSystem, check_controllability, compute_euoss_constants, paper_example_system, simulate

log = logging.getLogger(__name__)

PRESETS = {"paper-example": paper_example_system}

# stream ids for the per-seed generators
_OFFLINE_INPUT, _ONLINE_INPUT, _NOISE = 0, 1, 2


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class IngestionError(ValueError):
    pass


CONFIG_KEYS = (
    "system", "N", "L", "rho", "P", "R", "noise", "x0", "x_hat_0", "T_sim",
    "seeds", "state_box", "lambda", "input_range",
)


@dataclass
class ExperimentConfig:
    system: str | dict = "paper-example"
    N: int = 30
    L: int = 5
    rho: float = 1.0
    P: float | list = 10.0
    R: float | list = 10.0
    noise: dict = field(default_factory=lambda: {"kind": "gaussian", "mean": 0.0, "stddev": 2.0})
    x0: list = field(default_factory=lambda: [7.0, 7.0])
    x_hat_0: list = field(default_factory=lambda: [1.0, 2.0])
    T_sim: int = 60
    seeds: list = field(default_factory=lambda: [1])
    state_box: dict | None = None
    lam: float = analysis.DEFAULT_LAMBDA
    input_range: list = field(default_factory=lambda: [-5.0, 5.0])

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {("lam" if k == "lambda" else k): copy.deepcopy(v) for k, v in raw.items()}
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = {}
        for key in CONFIG_KEYS:
            out[key] = copy.deepcopy(getattr(self, "lam" if key == "lambda" else key))
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def replace(self, **changes) -> "ExperimentConfig":
        raw = self.to_dict()
        for k, v in changes.items():
            raw["lambda" if k == "lam" else k] = v
        return ExperimentConfig.from_dict(raw)

    def validate(self) -> None:
        sys = self.lti_system()
        n = sys.n
        for name in ("N", "L", "T_sim"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, int) or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")
        if not _is_number(self.rho) or not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho!r}")
        if not _is_number(self.lam) or not 0 < self.lam < 1:
            raise ConfigError(f"lambda must lie in (0, 1), got {self.lam!r}")
        if not isinstance(self.noise, dict) or set(self.noise) - {"kind", "mean", "stddev"}:
            raise ConfigError("noise must be an object with keys kind, mean, stddev")
        if self.noise.get("kind", "gaussian") != "gaussian":
            raise ConfigError(f"unsupported noise kind {self.noise.get('kind')!r}")
        if not _is_number(self.noise.get("mean", 0.0)) or not _is_number(self.noise.get("stddev", 0.0)) \
                or self.noise.get("stddev", 0.0) < 0:
            raise ConfigError("noise mean must be a number and stddev a nonnegative number")
        for name in ("x0", "x_hat_0"):
            vec = getattr(self, name)
            if not _is_vector(vec, n):
                raise ConfigError(f"{name} must be a list of {n} numbers")
        if not isinstance(self.seeds, list) or not self.seeds or not all(
                isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of nonnegative integers")
        if not _is_vector(self.input_range, 2) or not self.input_range[0] < self.input_range[1]:
            raise ConfigError("input_range must be [low, high] with low < high")
        if self.state_box is not None:
            if not isinstance(self.state_box, dict) or set(self.state_box) != {"lower", "upper"}:
                raise ConfigError("state_box must be an object with keys lower and upper")
            for k in ("lower", "upper"):
                if not (isinstance(self.state_box[k], list) and len(self.state_box[k]) == n
                        and all(v is None or _is_number(v) for v in self.state_box[k])):
                    raise ConfigError(f"state_box.{k} must be a list of {n} numbers (null = unbounded)")
        try:
            self.mhe_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def lti_system(self) -> LtiSystem:
        if isinstance(self.system, str):
            if self.system not in PRESETS:
                raise ConfigError(f"unknown system preset {self.system!r}")
            return PRESETS[self.system]()
        if not isinstance(self.system, dict) or set(self.system) - {"A", "B", "C", "D"} \
                or not {"A", "B", "C"} <= set(self.system):
            raise ConfigError("system must be a preset name or an object with keys A, B, C[, D]")
        try:
            return LtiSystem(**{k: np.array(v, dtype=float) for k, v in self.system.items()})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid system matrices: {exc}") from exc

    def weight(self, value, dim: int, name: str) -> np.ndarray:
        arr = np.array(value, dtype=float)
        if arr.ndim == 0:
            return float(arr) * np.eye(dim)
        if arr.shape != (dim, dim):
            raise ConfigError(f"{name} must be a scalar or a {dim}x{dim} matrix")
        return arr

    def mhe_config(self) -> MheConfig:
        sys = self.lti_system()
        box = None
        if self.state_box is not None:
            lo = [-math.inf if v is None else v for v in self.state_box["lower"]]
            hi = [math.inf if v is None else v for v in self.state_box["upper"]]
            box = StateBox(lo, hi)
        return MheConfig(
            L=self.L, rho=float(self.rho), P=self.weight(self.P, sys.n, "P"),
            R=self.weight(self.R, sys.p, "R"), x_hat_0=np.array(self.x_hat_0, dtype=float),
            state_box=box,
        )


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _is_vector(v, n: int) -> bool:
    return isinstance(v, list) and len(v) == n and all(_is_number(x) for x in v)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text())


# -- random streams -----------------------------------------------------------

def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Philox generator keyed by (seed, stream id)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream_id])))


def box_muller(rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` standard normal draws from pairs of uniforms."""
    pairs = (count + 1) // 2
    u1 = rng.random(pairs)
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log1p(-u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:count]


def gaussian_noise(seed: int, T: int, p: int, mean: float, stddev: float) -> np.ndarray:
    return mean + stddev * box_muller(stream(seed, _NOISE), T * p).reshape(T, p)


def online_inputs(seed: int, T: int, m: int, low: float, high: float) -> np.ndarray:
    return stream(seed, _ONLINE_INPUT).uniform(low, high, size=(T, m))


# -- datasets -----------------------------------------------------------------

def generate_dataset(sys: LtiSystem, N: int, L: int, seed: int, input_range=(-5.0, 5.0),
                     attempts: int = 10) -> OfflineDataset:
    """Noise-free offline data with an input certified PE of order L + n."""
    if not check_controllability(sys):
        raise GenerationError("system is not controllable")
    order = L + sys.n
    need = (sys.m + 1) * order - 1
    if N < need:
        log.warning("N=%d is below (m+1)(L+n)-1=%d; PE of order %d is impossible", N, need, order)
    for attempt in range(attempts):
        data_seed = int(np.random.SeedSequence([seed, _OFFLINE_INPUT, attempt]).generate_state(1)[0])
        u = generate_pe_input(sys.m, N, input_range[0], input_range[1], seed=data_seed)
        traj = simulate(sys, np.zeros(sys.n), u)
        ds = make_dataset(traj.inputs, traj.states, traj.outputs_clean)
        if ds.pe_order_certified >= order:
            return ds
    raise GenerationError(f"no input PE of order {order} found in {attempts} attempts (N={N})")


def _fmt(x: float) -> str:
    return repr(float(x))


def dataset_header(m: int, n: int, p: int) -> list[str]:
    return (["k"] + [f"u_{i}" for i in range(m)] + [f"x_{i}" for i in range(n)]
            + [f"y_{i}" for i in range(p)])


def dataset_to_csv(ds: OfflineDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(dataset_header(ds.m, ds.n, ds.p))
    for k in range(ds.N):
        w.writerow([k] + [_fmt(v) for v in (*ds.inputs[k], *ds.states[k], *ds.outputs[k])])
    return buf.getvalue()


def dataset_from_csv(text: str, sys: LtiSystem | None = None) -> OfflineDataset:
    """Parse a dataset CSV; with ``sys`` every row is checked against the recursion."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise IngestionError("empty dataset file")
    header = rows[0]
    m = sum(h.startswith("u_") for h in header)
    n = sum(h.startswith("x_") for h in header)
    p = sum(h.startswith("y_") for h in header)
    if header != dataset_header(m, n, p) or min(m, n, p) < 1:
        raise IngestionError(f"bad dataset header: {','.join(header)}")
    try:
        data = np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=float)
    except ValueError as exc:
        raise IngestionError(f"non-numeric dataset entry: {exc}") from exc
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != m + n + p:
        raise IngestionError("dataset rows do not match the header")
    u, x, y = data[:, :m], data[:, m:m + n], data[:, m + n:]
    if sys is not None:
        try:
            bad = check_consistency(sys, u, x, y)
        except ValueError as exc:
            raise IngestionError(str(exc)) from exc
        if bad is not None:
            raise IngestionError(f"dataset inconsistent with the system at row k={bad}")
    return make_dataset(u, x, y)


# -- runs ---------------------------------------------------------------------

@dataclass
class RunResult:
    record: analysis.RunRecord
    constants: analysis.RgesConstants
    report: analysis.RgesReport
    metrics: analysis.ErrorMetrics | None
    kalman_rmse: np.ndarray | None = None


def run_single(cfg: ExperimentConfig, dataset: OfflineDataset, seed: int,
               estimator: MheEstimator | None = None, kalman: bool = True) -> RunResult:
    """Simulate the plant for T_sim steps with seeded inputs and noise and run the estimator."""
    sys = cfg.lti_system()
    mcfg = cfg.mhe_config()
    T = cfg.T_sim
    u = online_inputs(seed, T, sys.m, *cfg.input_range)
    v = gaussian_noise(seed, T, sys.p, cfg.noise.get("mean", 0.0), cfg.noise.get("stddev", 0.0))
    traj = simulate(sys, cfg.x0, u, v)
    if estimator is None:
        estimator = MheEstimator(dataset, mcfg)
    else:
        estimator.reset()
    estimates = run_estimator(estimator, traj.inputs, traj.outputs_noisy)
    record = analysis.RunRecord(traj, estimates, np.array(cfg.x_hat_0, dtype=float), cfg.to_dict(), seed)
    constants = run_constants(cfg)
    report = analysis.verify_rges(record, constants)
    metrics = None
    if T - 2 * cfg.L >= 2:
        metrics = analysis.error_metrics(record.errors, cfg.L)
    kal = None
    if kalman:
        xk = analysis.kalman_baseline(sys, traj.inputs, traj.outputs_noisy,
                                      cfg.noise.get("stddev", 0.0) ** 2, cfg.x_hat_0)
        kal = np.sqrt(np.mean((xk - traj.states) ** 2, axis=0))
    return RunResult(record, constants, report, metrics, kal)


def run_constants(cfg: ExperimentConfig) -> analysis.RgesConstants:
    """Observer-derived constants; compliance is reported via the flags, not warnings."""
    euoss = compute_euoss_constants(cfg.lti_system())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", analysis.CertificateWarning)
        return analysis.compute_rges_constants(euoss, cfg.mhe_config(), cfg.lam)


def compliant_variant(cfg: ExperimentConfig) -> ExperimentConfig:
    """Same experiment with L >= T_min and rho <= rho_max, data long enough for PE."""
    c = run_constants(cfg)
    sys = cfg.lti_system()
    L = max(cfg.L, c.T_min)
    rho = min(float(cfg.rho), c.rho_max)
    N = max(cfg.N, (sys.m + 1) * (L + sys.n) - 1 + 20)
    return cfg.replace(L=L, rho=rho, N=N, T_sim=max(cfg.T_sim, 2 * L + 20))


RUN_HEADER_TAIL = ["e_norm", "sigma_norm", "cost", "qp_status", "bound"]


def _names(prefix: str, dim: int) -> list[str]:
    return [prefix] if dim == 1 else [f"{prefix}_{i}" for i in range(dim)]


def run_header(m: int, n: int, p: int) -> list[str]:
    return (["t"] + _names("u", m) + _names("y_clean", p) + _names("y_noisy", p) + _names("v", p)
            + [f"x_true_{i}" for i in range(n)] + [f"x_hat_{i}" for i in range(n)] + RUN_HEADER_TAIL)


def run_to_csv(result: RunResult) -> str:
    rec = result.record
    tr = rec.trajectory
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(run_header(tr.inputs.shape[1], tr.states.shape[1], tr.noise.shape[1]))
    e_norm = rec.error_norms
    for t, est in enumerate(rec.estimates):
        w.writerow(
            [t] + [_fmt(v) for v in (*tr.inputs[t], *tr.outputs_clean[t], *tr.outputs_noisy[t],
                                     *tr.noise[t], *tr.states[t], *est.x_hat)]
            + [_fmt(e_norm[t]), _fmt(np.linalg.norm(est.sigma_hat)), _fmt(est.cost), est.qp_status,
               _fmt(result.report.bound[t])]
        )
    return buf.getvalue()


@dataclass
class RunFile:
    e_norm: np.ndarray
    noise: np.ndarray
    states: np.ndarray
    estimates: np.ndarray


def run_from_csv(text: str) -> RunFile:
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2:
        raise IngestionError("run file has no data rows")
    header = rows[0]
    if header[0] != "t" or header[-len(RUN_HEADER_TAIL):] != RUN_HEADER_TAIL:
        raise IngestionError(f"bad run header: {','.join(header)}")
    col = {h: i for i, h in enumerate(header)}
    v_cols = [i for h, i in col.items() if h == "v" or h.startswith("v_")]
    x_cols = [i for h, i in col.items() if h.startswith("x_true_")]
    xh_cols = [i for h, i in col.items() if h.startswith("x_hat_")]
    if not v_cols or not x_cols or len(x_cols) != len(xh_cols):
        raise IngestionError("run file lacks noise or state columns")
    try:
        body = rows[1:]
        e = np.array([float(r[col["e_norm"]]) for r in body])
        v = np.array([[float(r[i]) for i in v_cols] for r in body])
        x = np.array([[float(r[i]) for i in x_cols] for r in body])
        xh = np.array([[float(r[i]) for i in xh_cols] for r in body])
    except (ValueError, IndexError) as exc:
        raise IngestionError(f"malformed run row: {exc}") from exc
    return RunFile(e_norm=e, noise=v, states=x, estimates=xh)


def write_svg(result: RunResult, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "datamhe"
    rec = result.record
    t = np.arange(len(rec.estimates))
    x = rec.trajectory.states[: len(t)]
    xh = rec.x_hat
    fig, ax = plt.subplots(figsize=(7, 3.2))
    for i in range(x.shape[1]):
        line, = ax.plot(t, x[:, i], label=f"$x_{i + 1}$")
        ax.plot(t, xh[:, i], "--", color=line.get_color(), label=f"$\\hat{{x}}_{i + 1}$")
    ax.set_xlabel("time step")
    ax.set_title(title)
    ax.legend(ncol=2 * x.shape[1], fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- example grid and sweeps ---------------------------------------------------

SETTINGS = {"a": {"R": 10.0, "P": 10.0}, "b": {"R": 100.0, "P": 10.0}}
NOISE_LEVELS = {"v1": 2.0, "v2": 6.0}


def grid_configs(base: ExperimentConfig | None = None) -> dict[tuple[str, str], ExperimentConfig]:
    base = base or ExperimentConfig()
    out = {}
    for s, weights in SETTINGS.items():
        for v, sd in NOISE_LEVELS.items():
            out[(s, v)] = base.replace(R=weights["R"], P=weights["P"],
                                       noise={"kind": "gaussian", "mean": 0.0, "stddev": sd})
    return out


def sweep(cfg: ExperimentConfig, seeds, dataset: OfflineDataset | None = None) -> list[RunResult]:
    """One run per seed; each seed generates its own offline data unless ``dataset`` is given."""
    sys = cfg.lti_system()
    results = []
    est = None
    for seed in seeds:
        ds = dataset if dataset is not None else generate_dataset(sys, cfg.N, cfg.L, seed, cfg.input_range)
        if dataset is not None and est is None:
            est = MheEstimator(ds, cfg.mhe_config())
        results.append(run_single(cfg, ds, seed, estimator=est if dataset is not None else None))
    return results


def summarize(results: dict[tuple[str, str], list[RunResult]]) -> dict:
    """Aggregate statistics over seeds (order-independent)."""
    out: dict = {"cells": {}}
    for (s, v), runs in sorted(results.items()):
        rmse = np.array([np.linalg.norm(r.metrics.rmse) for r in runs])
        var = np.array([r.metrics.variance for r in runs])
        kal = np.array([np.linalg.norm(r.kalman_rmse) for r in runs])
        out["cells"][f"{s}_{v}"] = {
            "mean_rmse": float(np.mean(rmse)),
            "mean_var_x1": float(np.mean(var[:, 0])),
            "mean_var_x2": float(np.mean(var[:, 1])) if var.shape[1] > 1 else None,
            "kalman_mean_rmse": float(np.mean(kal)),
            "rges_holds": all(r.report.holds for r in runs),
            "runs": len(runs),
        }
    for v in NOISE_LEVELS:
        a, b = results.get(("a", v)), results.get(("b", v))
        if a and b and a[0].metrics.variance.size > 1:
            wins = sum(rb.metrics.variance[1] > ra.metrics.variance[1]
                       for ra, rb in zip(sorted(a, key=_seed), sorted(b, key=_seed)))
            out[f"frac_var_x2_b_gt_a_{v}"] = wins / len(a)
    return out


def _seed(r: RunResult) -> int:
    return r.record.seed
