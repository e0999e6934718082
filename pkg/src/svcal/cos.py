"""COS (Fourier-cosine) pricing of European options under Heston and Bates.

Prices are normalized by the strike (``K = 1``, ``S0 = m``). The state
variable is ``y = ln(S_T / K)``; the integration interval is centred on the
first cumulant of ``y`` and sized from the second and fourth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import PricingError
from .models import ModelParams, Quote, model_cf_arrays, quote_arrays

OK, CUMULANT_OVERFLOW, ADAPTATION_FAILED, DIVERGED = 0, 1, 2, 3
STATUS_REASONS = {
    CUMULANT_OVERFLOW: "cumulant overflow",
    ADAPTATION_FAILED: "interval adaptation failed",
    DIVERGED: "pricing diverged",
}

# rows per vectorized block; bounds the (rows x n_terms) temporaries
_BLOCK = 1024


@dataclass(frozen=True)
class CosConfig:
    n_terms: int = 1500
    l_scale: float = 50.0
    max_widenings: int = 10

    def __post_init__(self):
        if int(self.n_terms) != self.n_terms or self.n_terms < 16:
            raise ValueError("n_terms must be an integer >= 16")
        if not self.l_scale > 0:
            raise ValueError("l_scale must be > 0")
        if int(self.max_widenings) != self.max_widenings or self.max_widenings < 0:
            raise ValueError("max_widenings must be an integer >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "CosConfig":
        unknown = set(d) - {"n_terms", "l_scale", "max_widenings"}
        if unknown:
            raise ValueError(f"unknown COS config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "CosConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TruncationInterval:
    a: float
    b: float

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"degenerate interval [{self.a}, {self.b}]")

    @property
    def center(self) -> float:
        return 0.5 * (self.a + self.b)


@dataclass
class CosDiagnostics:
    """Counters updated by batched pricing when passed in."""

    priced: int = 0
    clamped: int = 0
    widened: int = 0
    failed: dict = field(default_factory=dict)


def _as_theta(p) -> np.ndarray:
    return p.to_array() if hasattr(p, "to_array") else np.asarray(p, dtype=float)


def _heston_variance(rho, kappa, g, nu_bar, nu0, tau):
    # Variance of the integrated Heston log-return. The commonly copied
    # closed form has nu_bar * (6 e - 7) in the gamma^2 group, which goes
    # negative for small kappa and large gamma; expanding the Riccati ODE
    # to second order in u gives (4 e - 5).
    kt = kappa * tau
    e1 = np.exp(-kt)
    one_m_e1 = -np.expm1(-kt)
    return (
        g * tau * kappa * e1 * (nu0 - nu_bar) * (8.0 * kappa * rho - 4.0 * g)
        + kappa * rho * g * one_m_e1 * (16.0 * nu_bar - 8.0 * nu0)
        + 2.0 * nu_bar * kt * (-4.0 * kappa * rho * g + g * g + 4.0 * kappa * kappa)
        + g * g * ((nu_bar - 2.0 * nu0) * e1 * e1 + nu_bar * (4.0 * e1 - 5.0) + 2.0 * nu0)
        + 8.0 * kappa * kappa * (nu0 - nu_bar) * one_m_e1
    ) / (8.0 * kappa**3)


def cumulants_arrays(theta, m, tau, r):
    """First, second and fourth cumulants of ``ln(S_T/K)``.

    Heston contributes c1 and c2 only (its fourth cumulant is taken as
    zero); Bates adds the compound-Poisson cumulants.
    """
    theta = np.asarray(theta, dtype=float)
    rho, kappa, gamma, nu_bar, nu0, lam, mu, nu2 = (theta[..., i] for i in range(8))
    # closed forms cancel badly as kappa*tau -> 0; the floor only affects
    # the interval width, never the CF
    kappa = np.maximum(kappa, 1e-3 / tau)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        c1 = np.log(m) + r * tau - np.expm1(-kappa * tau) * (nu_bar - nu0) / (2.0 * kappa) - 0.5 * nu_bar * tau
        c2 = _heston_variance(rho, kappa, gamma, nu_bar, nu0, tau)
        jump_mean = np.expm1(mu + 0.5 * nu2)
        c1 = c1 + lam * tau * (mu - jump_mean)
        c2 = c2 + lam * tau * (mu * mu + nu2)
        c4 = lam * tau * (mu**4 + 6.0 * mu * mu * nu2 + 3.0 * nu2 * nu2)
    return c1, c2, c4


def cumulants(p: ModelParams, quote: Quote) -> tuple[float, float, float]:
    c1, c2, c4 = cumulants_arrays(_as_theta(p), quote.moneyness, quote.tau, quote.rate)
    return float(c1), float(c2), float(c4)


def _half_width(c2, c4, l_scale):
    with np.errstate(over="ignore", invalid="ignore"):
        return l_scale * np.sqrt(np.abs(c2) + np.sqrt(np.abs(c4)))


def cumulant_interval(p: ModelParams, quote: Quote, cfg: CosConfig = CosConfig()) -> TruncationInterval:
    """``[c1 - L sqrt(|c2| + sqrt|c4|), c1 + L sqrt(|c2| + sqrt|c4|)]`` before
    any sign adaptation."""
    c1, c2, c4 = cumulants(p, quote)
    w = float(_half_width(c2, c4, cfg.l_scale))
    if not (np.isfinite(c1) and np.isfinite(w) and w > 0):
        raise PricingError(STATUS_REASONS[CUMULANT_OVERFLOW])
    return TruncationInterval(c1 - w, c1 + w)


def widen_interval(iv: TruncationInterval, cfg: CosConfig = CosConfig()) -> TruncationInterval:
    """Double the interval about its centre until ``a < 0 < b``."""
    c, w = iv.center, 0.5 * (iv.b - iv.a)
    for _ in range(cfg.max_widenings + 1):
        if c - w < 0.0 < c + w:
            return TruncationInterval(c - w, c + w)
        w *= 2.0
    raise PricingError(STATUS_REASONS[ADAPTATION_FAILED])


def _chi_psi(c, d, a, b, k):
    """Closed-form cosine integrals of ``e^y`` and ``1`` over ``[c, d]``."""
    k = np.asarray(k, dtype=float)
    w = k * np.pi / (b - a)
    cd, sd = np.cos(w * (d - a)), np.sin(w * (d - a))
    cc, sc = np.cos(w * (c - a)), np.sin(w * (c - a))
    chi = (cd * np.exp(d) - cc * np.exp(c) + w * (sd * np.exp(d) - sc * np.exp(c))) / (1.0 + w * w)
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(k == 0, d - c, (sd - sc) / np.where(k == 0, 1.0, w))
    return chi, psi


def payoff_coefficients(quote: Quote, iv: TruncationInterval, k):
    """Cosine coefficients ``H_k`` of the strike-normalized payoff on ``[a, b]``.

    Puts pay ``(1 - e^y)^+`` on ``[a, 0]``, calls ``(e^y - 1)^+`` on ``[0, b]``;
    an empty support gives zeros.
    """
    a, b = iv.a, iv.b
    k = np.asarray(k)
    scale = 2.0 / (b - a)
    if quote.kind.value == "put":
        if a >= 0.0:
            return np.zeros(k.shape)
        chi, psi = _chi_psi(a, min(b, 0.0), a, b, k)
        return scale * (psi - chi)
    if b <= 0.0:
        return np.zeros(k.shape)
    chi, psi = _chi_psi(max(a, 0.0), b, a, b, k)
    return scale * (chi - psi)


def _phase_powers(theta, n):
    """``exp(1j * k * theta)`` for k = 0..n-1 by running product (rows = theta)."""
    z = np.empty((theta.shape[0], n), dtype=complex)
    z[:, 0] = 1.0
    z[:, 1:] = np.exp(1j * theta)[:, None]
    return np.cumprod(z, axis=1, out=z)


def _put_block(theta, m, tau, r, cfg, diag):
    n = theta.shape[0]
    status = np.zeros(n, dtype=np.int8)
    c1, c2, c4 = cumulants_arrays(theta, m, tau, r)
    w = _half_width(c2, c4, cfg.l_scale)
    bad = ~(np.isfinite(c1) & np.isfinite(w) & (w > 0))
    status[bad] = CUMULANT_OVERFLOW
    c1 = np.where(bad, 0.0, c1)
    w = np.where(bad, 1.0, w)

    need = ~((c1 - w < 0.0) & (0.0 < c1 + w))
    if diag is not None:
        diag.widened += int(np.count_nonzero(need & ~bad))
    for _ in range(cfg.max_widenings):
        if not need.any():
            break
        w = np.where(need, 2.0 * w, w)
        need = ~((c1 - w < 0.0) & (0.0 < c1 + w))
    status[need & ~bad] = ADAPTATION_FAILED
    a = c1 - w
    c1_ret = c1 - np.log(m)

    # The CF term Re(phi(u_k) e^{i u_k (x - a)}) only depends on
    # (theta, tau, r, w) because x - a = w - c1_ret; share it across strikes.
    keys = np.column_stack([theta, tau, r, w])
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    k = np.arange(cfg.n_terms, dtype=float)
    uw = np.pi / (2.0 * w[first])
    u = uw[:, None] * k[None, :]
    phi = model_cf_arrays(theta[first], r[first, None], tau[first, None], u)
    cf_term = (phi * _phase_powers(uw * (w[first] - c1_ret[first]), cfg.n_terms)).real
    cf_term[:, 0] *= 0.5

    # put payoff coefficients on [a, 0]
    om = np.pi / (2.0 * w)[:, None] * k[None, :]
    rot = _phase_powers(-a * np.pi / (2.0 * w), cfg.n_terms)
    cs, sn = rot.real, rot.imag
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = sn / om
    psi[:, 0] = -a
    ea = np.exp(a)[:, None]
    hk = (1.0 / w)[:, None] * ((ea - cs - om * sn) / (1.0 + om * om) + psi)

    with np.errstate(invalid="ignore", over="ignore"):
        price = np.exp(-r * tau) * np.einsum("ij,ij->i", cf_term[inverse], hk)
    diverged = ~np.isfinite(price) & (status == OK)
    status[diverged] = DIVERGED
    neg = (price < 0.0) & (status == OK)
    if diag is not None:
        diag.clamped += int(np.count_nonzero(neg))
    price = np.where(status == OK, np.maximum(price, 0.0), np.nan)
    return price, status


def price_grid(theta, m, tau, r, is_call=False, cfg: CosConfig = CosConfig(), diagnostics: CosDiagnostics | None = None):
    """Batched COS prices for rows of parameter vectors and quote data.

    ``theta`` has shape ``(n, 8)``; the quote arrays broadcast to ``(n,)``.
    Returns ``(prices, status)``; failed rows carry NaN and a nonzero status
    code (see :data:`STATUS_REASONS`). Calls are priced from puts by parity,
    since the call payoff grows like ``e^b`` on the very wide intervals used.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    n = theta.shape[0]
    m, tau, r, is_call = (np.broadcast_to(np.asarray(v, dtype=t), (n,)) for v, t in
                          ((m, float), (tau, float), (r, float), (is_call, bool)))
    prices = np.empty(n)
    status = np.empty(n, dtype=np.int8)
    for s in range(0, n, _BLOCK):
        sl = slice(s, s + _BLOCK)
        prices[sl], status[sl] = _put_block(theta[sl], m[sl], tau[sl], r[sl], cfg, diagnostics)
    call = is_call & (status == OK)
    prices[call] = np.maximum(prices[call] + m[call] - np.exp(-r[call] * tau[call]), 0.0)
    if diagnostics is not None:
        diagnostics.priced += n
        for code in np.unique(status[status != OK]):
            reason = STATUS_REASONS[int(code)]
            diagnostics.failed[reason] = diagnostics.failed.get(reason, 0) + int(np.count_nonzero(status == code))
    return prices, status


def cos_price(p: ModelParams, quote: Quote, cfg: CosConfig = CosConfig()) -> float:
    """Strike-normalized COS price of one European option."""
    prices, status = price_grid(_as_theta(p)[None, :], quote.moneyness, quote.tau, quote.rate,
                                quote.kind.value == "call", cfg)
    if status[0] != OK:
        raise PricingError(STATUS_REASONS[int(status[0])])
    return float(prices[0])


def price_surface(p: ModelParams, quotes, cfg: CosConfig = CosConfig()) -> np.ndarray:
    """Prices for a list of quotes, order preserved; the first failing quote
    raises with its index."""
    quotes = list(quotes)
    if not quotes:
        raise ValueError("quotes must be non-empty")
    m, tau, r, is_call = quote_arrays(quotes)
    theta = np.broadcast_to(_as_theta(p), (len(quotes), 8))
    prices, status = price_grid(theta, m, tau, r, is_call, cfg)
    bad = np.flatnonzero(status != OK)
    if bad.size:
        i = int(bad[0])
        raise PricingError(STATUS_REASONS[int(status[i])], index=i)
    return prices
