"""Model parameters, option quotes and characteristic functions.

Parameter vectors are handled internally as float arrays whose last axis
follows :data:`PARAM_NAMES`; Heston parameter sets carry zero jump entries.
All characteristic functions are for the log-return ``ln(S_T / S_0)``;
the COS layer adds the ``ln(S_0 / K)`` shift.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HESTON_NAMES = ("rho", "kappa", "gamma", "nu_bar", "nu0")
JUMP_NAMES = ("lambda_j", "mu_j", "nu_j_sq")
PARAM_NAMES = HESTON_NAMES + JUMP_NAMES


class OptionKind(str, enum.Enum):
    CALL = "call"
    PUT = "put"


class ValueKind(str, enum.Enum):
    PRICE = "price"
    IMPLIED_VOL = "iv"


class ModelKind(str, enum.Enum):
    HESTON = "heston"
    BATES = "bates"

    @property
    def param_names(self) -> tuple[str, ...]:
        return HESTON_NAMES if self is ModelKind.HESTON else PARAM_NAMES


@dataclass(frozen=True)
class HestonParams:
    rho: float
    kappa: float
    gamma: float
    nu_bar: float
    nu0: float

    def __post_init__(self):
        vals = [self.rho, self.kappa, self.gamma, self.nu_bar, self.nu0]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("Heston parameters must be finite")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [-1, 1], got {self.rho}")
        for name in ("kappa", "gamma", "nu_bar", "nu0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")

    def to_array(self) -> np.ndarray:
        return np.array([self.rho, self.kappa, self.gamma, self.nu_bar, self.nu0, 0.0, 0.0, 0.0])

    def to_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in HESTON_NAMES}

    @property
    def kind(self) -> ModelKind:
        return ModelKind.HESTON


@dataclass(frozen=True)
class BatesParams:
    heston: HestonParams
    lambda_j: float = 0.0
    mu_j: float = 0.0
    nu_j_sq: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.lambda_j, self.mu_j, self.nu_j_sq)):
            raise ValueError("jump parameters must be finite")
        if self.lambda_j < 0:
            raise ValueError(f"lambda_j must be >= 0, got {self.lambda_j}")
        if self.nu_j_sq < 0:
            raise ValueError(f"nu_j_sq must be >= 0, got {self.nu_j_sq}")

    def to_array(self) -> np.ndarray:
        arr = self.heston.to_array()
        arr[5:] = (self.lambda_j, self.mu_j, self.nu_j_sq)
        return arr

    def to_dict(self) -> dict[str, float]:
        d = self.heston.to_dict()
        d.update(lambda_j=float(self.lambda_j), mu_j=float(self.mu_j), nu_j_sq=float(self.nu_j_sq))
        return d

    @property
    def kind(self) -> ModelKind:
        return ModelKind.BATES


ModelParams = HestonParams | BatesParams


def params_from_dict(d: dict, kind: ModelKind | str | None = None) -> ModelParams:
    """Build parameters from the flat JSON-style mapping.

    Jump keys are optional and default to zero. Without an explicit ``kind``
    a Bates object is returned only when a jump key is present.
    """
    unknown = set(d) - set(PARAM_NAMES)
    if unknown:
        raise ValueError(f"unknown parameter names: {sorted(unknown)}")
    missing = [k for k in HESTON_NAMES if k not in d]
    if missing:
        raise ValueError(f"missing parameters: {missing}")
    heston = HestonParams(**{k: float(d[k]) for k in HESTON_NAMES})
    if kind is None:
        kind = ModelKind.BATES if any(k in d for k in JUMP_NAMES) else ModelKind.HESTON
    if ModelKind(kind) is ModelKind.HESTON:
        return heston
    return BatesParams(heston, **{k: float(d.get(k, 0.0)) for k in JUMP_NAMES})


def params_from_array(arr, kind: ModelKind | str = ModelKind.BATES) -> ModelParams:
    arr = np.asarray(arr, dtype=float)
    return params_from_dict(dict(zip(PARAM_NAMES, arr.tolist())), kind)


def load_params(path: str | Path, kind: ModelKind | str | None = None) -> ModelParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh), kind)


def save_params(p: ModelParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(p.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class Quote:
    moneyness: float
    tau: float
    rate: float
    kind: OptionKind = OptionKind.PUT

    def __post_init__(self):
        if not self.moneyness > 0:
            raise ValueError(f"moneyness must be > 0, got {self.moneyness}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        object.__setattr__(self, "kind", OptionKind(self.kind))


@dataclass(frozen=True)
class QuoteSurface:
    quotes: tuple[Quote, ...]
    observed: np.ndarray
    value_kind: ValueKind = ValueKind.IMPLIED_VOL
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        quotes = tuple(self.quotes)
        observed = np.asarray(self.observed, dtype=float).copy()
        weights = np.ones(len(quotes)) if self.weights is None else np.asarray(self.weights, dtype=float).copy()
        if len(quotes) < 1:
            raise ValueError("a quote surface needs at least one quote")
        if observed.shape != (len(quotes),) or weights.shape != (len(quotes),):
            raise ValueError("quotes, observed and weights must have equal length")
        if np.any(weights < 0) or not np.any(weights > 0):
            raise ValueError("weights must be >= 0 with at least one > 0")
        observed.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "quotes", quotes)
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "value_kind", ValueKind(self.value_kind))

    def __len__(self):
        return len(self.quotes)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(moneyness, tau, rate, is_call)`` as arrays."""
        return quote_arrays(self.quotes)

    def with_weights(self, weights) -> "QuoteSurface":
        return QuoteSurface(self.quotes, self.observed, self.value_kind, weights)


def quote_arrays(quotes) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    m = np.array([q.moneyness for q in quotes], dtype=float)
    tau = np.array([q.tau for q in quotes], dtype=float)
    r = np.array([q.rate for q in quotes], dtype=float)
    is_call = np.array([q.kind is OptionKind.CALL for q in quotes])
    return m, tau, r, is_call


# --------------------------------------------------------------------------
# characteristic functions
# --------------------------------------------------------------------------

def _log1p_ratio(z):
    """``log1p(z) / z`` computed accurately for small complex ``z``."""
    # numpy's complex log1p loses all accuracy for |z| << 1; below 1e-4 the
    # series is exact to double precision and avoids subnormal division
    z = np.asarray(z)
    w = 1.0 + z
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.log(w) / (w - 1.0)
    series = 1.0 - z * (0.5 - z * (1.0 / 3.0 - z * (0.25 - z * 0.2)))
    return np.where(np.abs(z) < 1e-4, series, out)


def heston_cf_arrays(rho, kappa, gamma, nu_bar, nu0, r, tau, u):
    """Vectorized Heston CF of the log-return; all arguments broadcast.

    Uses the rotated ("little trap") branch with every ``1/gamma**2`` factor
    cancelled analytically, so it stays accurate as ``gamma -> 0``.
    """
    u = np.asarray(u, dtype=complex)
    iu = 1j * u
    beta = kappa - rho * gamma * iu
    q = iu + u * u  # d^2 = beta^2 + gamma^2 q
    d = np.sqrt(beta * beta + gamma * gamma * q)
    bd = beta + d
    with np.errstate(divide="ignore", invalid="ignore"):
        # beta - d = -gamma^2 q / (beta + d); g = (beta - d) / (beta + d)
        bmd_over_g2 = -q / bd
        g = gamma * gamma * bmd_over_g2 / bd
        one_me = -np.expm1(-d * tau)
        e = 1.0 - one_me
        big_d = bmd_over_g2 * one_me / (1.0 - g * e)
        # ln((1 - g e) / (1 - g)) = log1p(z), z = g (1 - e) / (1 - g) = O(gamma^2)
        z_over_g2 = bmd_over_g2 / bd * one_me / (1.0 - g)
        log_term = z_over_g2 * _log1p_ratio(gamma * gamma * z_over_g2)
        c = kappa * nu_bar * (bmd_over_g2 * tau - 2.0 * log_term)
    # u == 0 gives 0/0 above; the CF is exactly 1 there
    zero = u == 0
    c = np.where(zero, 0.0, c)
    big_d = np.where(zero, 0.0, big_d)
    return np.exp(iu * r * tau + c + big_d * nu0)


def jump_factor_arrays(lambda_j, mu_j, nu_j_sq, tau, u):
    """Compound-Poisson factor of the Bates CF including the martingale
    compensator."""
    u = np.asarray(u, dtype=complex)
    iu = 1j * u
    mean_jump = np.expm1(mu_j + 0.5 * nu_j_sq)
    expo = lambda_j * tau * (np.expm1(iu * mu_j - 0.5 * u * u * nu_j_sq) - iu * mean_jump)
    return np.exp(expo)


def heston_cf(p: HestonParams | BatesParams, r: float, tau: float, u):
    """``E[exp(i u ln(S_T/S_0))]`` under Heston (jump entries ignored)."""
    h = p.heston if isinstance(p, BatesParams) else p
    return heston_cf_arrays(h.rho, h.kappa, h.gamma, h.nu_bar, h.nu0, r, tau, u)


def bates_cf(p: HestonParams | BatesParams, r: float, tau: float, u):
    """Heston CF times the compound-Poisson jump factor."""
    phi = heston_cf(p, r, tau, u)
    if isinstance(p, HestonParams) or p.lambda_j == 0.0:
        return phi
    return phi * jump_factor_arrays(p.lambda_j, p.mu_j, p.nu_j_sq, tau, u)


def model_cf_arrays(theta, r, tau, u):
    """CF for a batch of 8-vectors ``theta`` (last axis in PARAM_NAMES
    order), broadcast against ``r``, ``tau`` and ``u``."""
    theta = np.asarray(theta, dtype=float)
    cols = [theta[..., i] for i in range(8)]
    extra = np.ndim(u) - theta.ndim + 1
    if extra > 0:
        cols = [c.reshape(c.shape + (1,) * extra) for c in cols]
    rho, kappa, gamma, nu_bar, nu0, lam, mu, nu2 = cols
    phi = heston_cf_arrays(rho, kappa, gamma, nu_bar, nu0, r, tau, u)
    if np.any(lam != 0.0):
        phi = np.where(lam != 0.0, phi * jump_factor_arrays(lam, mu, nu2, tau, u), phi)
    return phi
