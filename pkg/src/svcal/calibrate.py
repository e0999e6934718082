"""Calibration of Heston/Bates parameters to an implied-volatility surface.

A candidate matrix of free-parameter vectors is expanded against every
quote and priced in one batched backend call; Differential Evolution then
minimizes the weighted squared IV error over the free-parameter box.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bsiv import IV_OK, IV_REASONS, IvConfig, bs_price_arrays, implied_vol_arrays
from .cos import OK, STATUS_REASONS, CosConfig, price_grid
from .datagen import input_columns
from .de import DEConfig, DEResult, de_minimize
from .errors import ImpliedVolError, PricingError
from .models import (PARAM_NAMES, ModelKind, ModelParams, OptionKind, Quote, QuoteSurface,
                     ValueKind, params_from_array, quote_arrays)
from .nnet import Network, forward, load_weights

log = logging.getLogger(__name__)

DEFAULT_MONEYNESS = tuple(np.linspace(0.85, 1.15, 5))
DEFAULT_MATURITIES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
DEFAULT_RATE = 0.03
IV_ENVELOPE = (0.2, 0.5)
_LOG_FLOOR = 1e-30

HESTON_SEARCH_BOX = {
    "rho": (-0.85, -0.05),
    "kappa": (0.1, 2.0),
    "gamma": (0.05, 0.75),
    "nu_bar": (0.05, 0.45),
    "nu0": (0.05, 0.45),
}
BATES_SEARCH_BOX = {
    "rho": (-0.9, 0.0),
    "kappa": (0.1, 3.0),
    "gamma": (0.01, 0.8),
    "nu_bar": (0.01, 0.5),
    "nu0": (0.01, 0.5),
    "lambda_j": (0.0, 3.0),
    "mu_j": (0.0, 0.4),
    "nu_j_sq": (0.0, 0.3),
}


# --------------------------------------------------------------------------
# backends: (K, 8) parameter rows x N quotes -> (K, N) model values
# --------------------------------------------------------------------------

class CosBrentBackend:
    """Exact backend: COS prices, then Brent implied vols."""

    name = "cos"

    def __init__(self, cos_cfg: CosConfig = CosConfig(), iv_cfg: IvConfig = IvConfig(), threads: int = 1):
        self.cos_cfg = cos_cfg
        self.iv_cfg = iv_cfg
        self.threads = max(1, int(threads))

    def _block(self, theta, m, tau, r, is_call, value_kind):
        k, n = theta.shape[0], m.size
        th = np.repeat(theta, n, axis=0)
        mm, tt, rr, cc = (np.tile(a, k) for a in (m, tau, r, is_call))
        price, status = price_grid(th, mm, tt, rr, cc, self.cos_cfg)
        if value_kind is ValueKind.PRICE:
            return price.reshape(k, n)
        iv = np.full(price.shape, np.nan)
        ok = status == OK
        if ok.any():
            iv[ok], _ = implied_vol_arrays(price[ok], mm[ok], tt[ok], rr[ok], cc[ok], self.iv_cfg)
        return iv.reshape(k, n)

    def values(self, theta, m, tau, r, is_call, value_kind=ValueKind.IMPLIED_VOL) -> np.ndarray:
        theta = np.atleast_2d(theta)
        if self.threads == 1 or theta.shape[0] < 2 * self.threads:
            return self._block(theta, m, tau, r, is_call, value_kind)
        parts = np.array_split(theta, self.threads)
        with ThreadPoolExecutor(self.threads) as pool:
            out = list(pool.map(lambda t: self._block(t, m, tau, r, is_call, value_kind), parts))
        return np.vstack(out)


class SurrogateBackend:
    """Network forward pass on ``(m, tau, r, params)`` rows; prices, when
    asked for, are Black-Scholes values at the predicted IV."""

    name = "surrogate"

    def __init__(self, net: Network, model: ModelKind | str):
        self.net = net
        self.model = ModelKind(model)
        self.columns = input_columns(self.model)
        if net.spec.input_dim != len(self.columns):
            raise ValueError(f"network expects {net.spec.input_dim} inputs, {self.model.value} needs {len(self.columns)}")

    def training_range(self, name: str) -> tuple[float, float]:
        j = self.columns.index(name)
        return float(self.net.input_low[j]), float(self.net.input_high[j])

    def values(self, theta, m, tau, r, is_call, value_kind=ValueKind.IMPLIED_VOL) -> np.ndarray:
        theta = np.atleast_2d(theta)
        k, n = theta.shape[0], m.size
        nparam = len(self.columns) - 3
        x = np.empty((k * n, len(self.columns)))
        x[:, 0] = np.tile(m, k)
        x[:, 1] = np.tile(tau, k)
        x[:, 2] = np.tile(r, k)
        x[:, 3:] = np.repeat(theta[:, :nparam], n, axis=0)
        iv = forward(self.net, x).reshape(k, n)
        if value_kind is ValueKind.PRICE:
            return bs_price_arrays(np.maximum(iv, 1e-12), m, tau, r, is_call)
        return iv


Backend = CosBrentBackend | SurrogateBackend


# --------------------------------------------------------------------------
# problem and objective
# --------------------------------------------------------------------------

@dataclass
class CalibrationProblem:
    surface: QuoteSurface
    model: ModelKind
    free: dict[str, tuple[float, float]]
    fixed: dict[str, float] = field(default_factory=dict)
    backend: Backend = field(default_factory=CosBrentBackend)
    lambda_bar: float | None = None

    def __post_init__(self):
        self.model = ModelKind(self.model)
        names = self.model.param_names
        free = {k: (float(v[0]), float(v[1])) for k, v in self.free.items()}
        fixed = {k: float(v) for k, v in self.fixed.items()}
        both = set(free) & set(fixed)
        if both:
            raise ValueError(f"parameters both free and fixed: {sorted(both)}")
        covered = set(free) | set(fixed)
        if covered != set(names):
            missing = sorted(set(names) - covered)
            extra = sorted(covered - set(names))
            raise ValueError(f"free and fixed must cover {names} exactly (missing {missing}, unknown {extra})")
        if not free:
            raise ValueError("at least one parameter must be free")
        for k, (lo, hi) in free.items():
            if not lo < hi:
                raise ValueError(f"box for {k}: low must be < high")
        # free parameters in canonical order
        self.free = {k: free[k] for k in names if k in free}
        self.fixed = fixed
        if self.lambda_bar is None:
            self.lambda_bar = 1e-6 if len(self.free) > 3 else 0.0
        if self.lambda_bar < 0:
            raise ValueError("lambda_bar must be >= 0")
        if isinstance(self.backend, SurrogateBackend):
            if self.backend.model is not self.model:
                raise ValueError("surrogate model kind differs from problem model kind")
            for k, (lo, hi) in self.free.items():
                tlo, thi = self.backend.training_range(k)
                if lo < tlo or hi > thi:
                    raise ValueError(f"search box for {k} [{lo}, {hi}] exceeds surrogate training range [{tlo}, {thi}]")

    @property
    def free_names(self) -> tuple[str, ...]:
        return tuple(self.free)

    @property
    def bounds(self) -> tuple[tuple[float, float], ...]:
        return tuple(self.free.values())

    def full_params(self, x) -> np.ndarray:
        """Map ``(K, n_free)`` candidates to ``(K, 8)`` parameter rows."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != len(self.free):
            raise ValueError(f"candidates need {len(self.free)} columns, got {x.shape[1]}")
        theta = np.zeros((x.shape[0], len(PARAM_NAMES)))
        for j, name in enumerate(PARAM_NAMES):
            if name in self.free:
                theta[:, j] = x[:, self.free_names.index(name)]
            elif name in self.fixed:
                theta[:, j] = self.fixed[name]
        return theta

    def params(self, x) -> ModelParams:
        return params_from_array(self.full_params(x)[0], self.model)

    def model_values(self, x) -> np.ndarray:
        m, tau, r, is_call = self.surface.arrays()
        return self.backend.values(self.full_params(x), m, tau, r, is_call, self.surface.value_kind)


def objective(problem: CalibrationProblem, candidates, lambda_bar: float | None = None) -> np.ndarray:
    """Weighted squared error plus ``lambda_bar * ||x||_2`` per candidate
    row; candidates whose valuation fails on any quote get ``+inf``."""
    lam = problem.lambda_bar if lambda_bar is None else lambda_bar
    x = np.atleast_2d(np.asarray(candidates, dtype=float))
    vals = problem.model_values(x)
    resid = vals - problem.surface.observed
    sq = problem.surface.weights * resid * resid
    # a zero-weight quote still has to be priceable
    energy = np.where(np.all(np.isfinite(resid), axis=1), sq.sum(axis=1), np.inf)
    if lam:
        energy = energy + lam * np.linalg.norm(x, axis=1)
    return energy


def mse_objective(problem: CalibrationProblem, candidates) -> np.ndarray:
    """Unregularized objective divided by the number of quotes."""
    return objective(problem, candidates, lambda_bar=0.0) / len(problem.surface)


# --------------------------------------------------------------------------
# synthetic market
# --------------------------------------------------------------------------

def market_quotes(moneyness=DEFAULT_MONEYNESS, maturities=DEFAULT_MATURITIES, rate=DEFAULT_RATE) -> list[Quote]:
    """Moneyness x maturity grid, OTM convention: calls below m = 1, puts
    at and above."""
    return [Quote(float(m), float(t), float(rate), OptionKind.CALL if m < 1.0 else OptionKind.PUT)
            for t in maturities for m in moneyness]


def synth_market(truth: ModelParams, moneyness=DEFAULT_MONEYNESS, maturities=DEFAULT_MATURITIES,
                 rate=DEFAULT_RATE, weights=None, cos_cfg: CosConfig = CosConfig(),
                 iv_cfg: IvConfig = IvConfig(), quotes=None) -> QuoteSurface:
    """Observed IV surface generated from known parameters with COS + Brent."""
    quotes = market_quotes(moneyness, maturities, rate) if quotes is None else list(quotes)
    m, tau, r, is_call = quote_arrays(quotes)
    theta = np.broadcast_to(truth.to_array(), (len(quotes), len(PARAM_NAMES)))
    price, pstat = price_grid(theta, m, tau, r, is_call, cos_cfg)
    bad = np.flatnonzero(pstat != OK)
    if bad.size:
        raise PricingError(STATUS_REASONS[int(pstat[bad[0]])], int(bad[0]))
    iv, istat = implied_vol_arrays(price, m, tau, r, is_call, iv_cfg)
    bad = np.flatnonzero(istat != IV_OK)
    if bad.size:
        raise ImpliedVolError(IV_REASONS[int(istat[bad[0]])], int(bad[0]))
    surface = QuoteSurface(tuple(quotes), iv, ValueKind.IMPLIED_VOL, weights)
    for i in envelope_violations(surface):
        q = quotes[i]
        log.warning("quote %d (m=%g, tau=%g) IV %.4f outside %s", i, q.moneyness, q.tau, iv[i], IV_ENVELOPE)
    return surface


def envelope_violations(surface: QuoteSurface, envelope=IV_ENVELOPE) -> list[int]:
    lo, hi = envelope
    obs = surface.observed
    return [int(i) for i in np.flatnonzero((obs <= lo) | (obs >= hi))]


def resolve_weights(spec, surface: QuoteSurface) -> np.ndarray:
    """Weights from a scalar, a per-quote list, or ``{"atm": w}`` (quotes
    at m = 1 get ``w``, the rest 1)."""
    n = len(surface)
    if spec is None:
        return np.asarray(surface.weights, dtype=float)
    if isinstance(spec, dict):
        unknown = set(spec) - {"atm"}
        if unknown:
            raise ValueError(f"unknown weight keys: {sorted(unknown)}")
        m = np.array([q.moneyness for q in surface.quotes])
        return np.where(np.isclose(m, 1.0, rtol=0, atol=1e-12), float(spec["atm"]), 1.0)
    w = np.asarray(spec, dtype=float)
    if w.ndim == 0:
        return np.full(n, float(w))
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got {w.size}")
    return w


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

@dataclass
class CalibrationResult:
    model: ModelKind
    free_names: tuple[str, ...]
    free_values: np.ndarray
    params: dict[str, float]
    objective: float
    mean_objective: float
    lambda_bar: float
    function_evaluations: int
    generations: int
    converged: bool
    wall_time: float
    residuals: np.ndarray
    weights: np.ndarray
    ground_total_squared_error: float | None = None
    trace: object = None

    def recompute_objective(self) -> float:
        """J rebuilt from the stored residuals, weights and free values."""
        j = float(np.sum(self.weights * self.residuals ** 2))
        return j + self.lambda_bar * float(np.linalg.norm(self.free_values))

    def to_dict(self) -> dict:
        return {
            "model": self.model.value,
            "free_names": list(self.free_names),
            "free_values": self.free_values.tolist(),
            "params": self.params,
            "objective": self.objective,
            "mean_objective": self.mean_objective,
            "lambda_bar": self.lambda_bar,
            "function_evaluations": self.function_evaluations,
            "generations": self.generations,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "residuals": self.residuals.tolist(),
            "weights": self.weights.tolist(),
            "ground_total_squared_error": self.ground_total_squared_error,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def ground_error(params: ModelParams | np.ndarray, surface: QuoteSurface, cos_cfg: CosConfig = CosConfig(),
                 iv_cfg: IvConfig = IvConfig()) -> float:
    """Unweighted ``sum (sigma_cos(params) - sigma_obs)^2`` with the exact
    pricer."""
    theta = params.to_array() if hasattr(params, "to_array") else np.asarray(params, dtype=float)
    m, tau, r, is_call = surface.arrays()
    iv = CosBrentBackend(cos_cfg, iv_cfg).values(theta[None, :], m, tau, r, is_call)[0]
    return float(np.sum((iv - surface.observed) ** 2))


def calibrate(problem: CalibrationProblem, de_cfg: DEConfig = DEConfig(), ground_check: bool = True,
              cos_cfg: CosConfig = CosConfig(), iv_cfg: IvConfig = IvConfig()) -> CalibrationResult:
    """Differential Evolution over the free-parameter box.

    ``de_cfg.bounds`` is replaced by the problem's boxes. With
    ``ground_check`` the recovered parameters are re-priced with COS +
    Brent to report the ground total squared error.
    """
    cfg = replace(de_cfg, bounds=problem.bounds)
    t0 = time.perf_counter()
    res: DEResult = de_minimize(lambda x: objective(problem, x), cfg)
    wall = time.perf_counter() - t0
    x = res.x
    resid = problem.model_values(x)[0] - problem.surface.observed
    weights = np.asarray(problem.surface.weights, dtype=float)
    p = problem.params(x)
    out = CalibrationResult(
        model=problem.model,
        free_names=problem.free_names,
        free_values=x.copy(),
        params=p.to_dict(),
        objective=math.nan,
        mean_objective=math.nan,
        lambda_bar=float(problem.lambda_bar),
        function_evaluations=res.function_evaluations,
        generations=res.generations,
        converged=res.converged,
        wall_time=wall,
        residuals=resid,
        weights=weights,
        trace=res.trace,
    )
    out.objective = out.recompute_objective()
    out.mean_objective = out.objective / len(problem.surface)
    if ground_check:
        out.ground_total_squared_error = ground_error(p, problem.surface, cos_cfg, iv_cfg)
    return out


# --------------------------------------------------------------------------
# sensitivity
# --------------------------------------------------------------------------

@dataclass
class SensitivityReport:
    names: tuple[str, ...]
    point: np.ndarray
    steps: np.ndarray
    raw: np.ndarray
    hessian: np.ndarray

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.hessian).copy()

    @property
    def asymmetry(self) -> float:
        """``||H - H^T||_inf / ||H||_inf`` before symmetrization."""
        norm = np.abs(self.raw).sum(axis=1).max()
        return float(np.abs(self.raw - self.raw.T).sum(axis=1).max() / norm) if norm else 0.0

    def diagonal_ratio(self) -> float:
        d = np.abs(self.diagonal)
        return float(d.max() / d.min())

    def to_dict(self) -> dict:
        return {"names": list(self.names), "point": self.point.tolist(), "steps": self.steps.tolist(),
                "hessian": self.hessian.tolist(), "diagonal": self.diagonal.tolist(),
                "max_min_diagonal_ratio": self.diagonal_ratio(), "asymmetry": self.asymmetry}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param"] + list(self.names))
            for name, row in zip(self.names, self.hessian):
                w.writerow([name] + [repr(float(v)) for v in row])


def hessian_fd(func, point, steps, lower=None, upper=None, names=None) -> SensitivityReport:
    """Central-difference Hessian of a batched scalar function.

    Diagonal entries use the 3-point second difference, off-diagonal ones
    the 4-point cross stencil. All stencil points go through ``func`` in a
    single batch.
    """
    x = np.asarray(point, dtype=float)
    h = np.asarray(steps, dtype=float) * np.ones_like(x)
    d = x.size
    if lower is not None and (np.any(x - h < lower) or np.any(x + h > upper)):
        raise ValueError("stencil point infeasible: point must be interior to the box by at least h")
    eye = np.diag(h)
    pts = [x]
    for i in range(d):
        pts += [x + eye[i], x - eye[i]]
    pairs = [(i, j) for i in range(d) for j in range(d) if i != j]
    for i, j in pairs:
        pts += [x + eye[i] + eye[j], x + eye[i] - eye[j], x - eye[i] + eye[j], x - eye[i] - eye[j]]
    f = np.asarray(func(np.array(pts)), dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("stencil point infeasible: objective not finite")
    f0 = f[0]
    raw = np.empty((d, d))
    for i in range(d):
        raw[i, i] = (f[1 + 2 * i] - 2.0 * f0 + f[2 + 2 * i]) / (h[i] * h[i])
    off = 1 + 2 * d
    for k, (i, j) in enumerate(pairs):
        pp, pm, mp, mm = f[off + 4 * k: off + 4 * k + 4]
        raw[i, j] = (pp - pm - mp + mm) / (4.0 * h[i] * h[j])
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(d))
    return SensitivityReport(names, x, h, raw, 0.5 * (raw + raw.T))


def hessian(problem: CalibrationProblem, point, steps=None) -> SensitivityReport:
    """Hessian of the unregularized MSE objective over the free parameters.

    Default steps are ``1e-3`` of each box width.
    """
    lo = np.array([b[0] for b in problem.bounds])
    hi = np.array([b[1] for b in problem.bounds])
    h = 1e-3 * (hi - lo) if steps is None else np.asarray(steps, dtype=float)
    return hessian_fd(lambda x: mse_objective(problem, x), point, h, lo, hi, problem.free_names)


# --------------------------------------------------------------------------
# two-parameter landscape
# --------------------------------------------------------------------------

LANDSCAPE_TRUTH = {"rho": -0.5, "kappa": 1.0, "gamma": 0.25, "nu_bar": 0.2, "nu0": 0.2}


def landscape(truth: ModelParams, names: tuple[str, str], grids: tuple, surface: QuoteSurface | None = None,
              backend: Backend | None = None) -> np.ndarray:
    """MSE on the product grid of two parameters, others held at ``truth``.

    Returns rows ``(value_1, value_2, mse, log10_mse)``; the first name
    varies slowest. ``log10_mse`` is floored at ``log10(1e-30)``.
    """
    a, b = names
    if a == b:
        raise ValueError("landscape needs two distinct parameters")
    model = truth.kind
    for n in names:
        if n not in model.param_names:
            raise ValueError(f"unknown parameter name {n!r} for {model.value}")
    surface = synth_market(truth) if surface is None else surface
    g1 = np.asarray(grids[0], dtype=float)
    g2 = np.asarray(grids[1], dtype=float)
    tv = truth.to_dict()
    fixed = {k: v for k, v in tv.items() if k not in names}
    free = {a: (min(g1.min(), tv[a]) - 1.0, max(g1.max(), tv[a]) + 1.0),
            b: (min(g2.min(), tv[b]) - 1.0, max(g2.max(), tv[b]) + 1.0)}
    problem = CalibrationProblem(surface, model, free, fixed, backend or CosBrentBackend(), lambda_bar=0.0)
    ga, gb = np.meshgrid(g1, g2, indexing="ij")
    cand = np.zeros((ga.size, 2))
    ia = problem.free_names.index(a)
    cand[:, ia] = ga.ravel()
    cand[:, 1 - ia] = gb.ravel()
    mse = mse_objective(problem, cand)
    return np.column_stack([ga.ravel(), gb.ravel(), mse, np.log10(np.maximum(mse, _LOG_FLOOR))])


def save_landscape(rows, names, path) -> None:
    np.savetxt(path, rows, delimiter=",", comments="", fmt="%.17g",
               header=f"{names[0]},{names[1]},mse,log10_mse")


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------

SURFACE_COLUMNS = ("m", "tau", "r", "kind", "observed", "weight")


def save_surface(surface: QuoteSurface, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SURFACE_COLUMNS)
        for q, obs, wt in zip(surface.quotes, surface.observed, surface.weights):
            w.writerow([repr(q.moneyness), repr(q.tau), repr(q.rate), q.kind.value, repr(float(obs)), repr(float(wt))])


def load_surface(path: str | Path, value_kind: ValueKind | str = ValueKind.IMPLIED_VOL) -> QuoteSurface:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty surface file")
    missing = set(SURFACE_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    quotes = tuple(Quote(float(r["m"]), float(r["tau"]), float(r["r"]), OptionKind(r["kind"])) for r in rows)
    obs = [float(r["observed"]) for r in rows]
    wts = [float(r["weight"]) for r in rows]
    return QuoteSurface(quotes, obs, value_kind, wts)


def load_problem(path: str | Path, threads: int = 1, cos_cfg: CosConfig = CosConfig(),
                 iv_cfg: IvConfig = IvConfig()) -> CalibrationProblem:
    """Problem JSON: ``{model, backend, weights_file?, surface_file, free,
    fixed, lambda_bar, weights, value_kind?}``; relative paths resolve
    against the JSON file's directory."""
    path = Path(path)
    doc = json.loads(path.read_text())
    known = {"model", "backend", "weights_file", "surface_file", "free", "fixed", "lambda_bar", "weights", "value_kind"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"{path}: unknown problem keys {sorted(unknown)}")
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    surface = load_surface(resolve(doc["surface_file"]), doc.get("value_kind", "iv"))
    if "weights" in doc:
        surface = surface.with_weights(resolve_weights(doc["weights"], surface))
    model = ModelKind(doc.get("model", "heston"))
    kind = doc.get("backend", "cos")
    if kind == "cos":
        backend = CosBrentBackend(cos_cfg, iv_cfg, threads)
    elif kind == "surrogate":
        if "weights_file" not in doc:
            raise ValueError(f"{path}: surrogate backend needs weights_file")
        backend = SurrogateBackend(load_weights(resolve(doc["weights_file"])), model)
    else:
        raise ValueError(f"{path}: unknown backend {kind!r}")
    free = {k: tuple(v) for k, v in doc["free"].items()}
    return CalibrationProblem(surface, model, free, doc.get("fixed", {}), backend, doc.get("lambda_bar"))

