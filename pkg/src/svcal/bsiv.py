"""Black-Scholes prices and implied volatility by Brent's method.

Everything is strike-normalized: ``S0 = m``, ``K = 1``. The root finder is
a vectorized transcription of Brent's zeroin (bisection / secant / inverse
quadratic interpolation), so whole quote grids are inverted in one call.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ImpliedVolError
from .models import Quote

IV_OK, NO_IMPLIED_VOL, BRACKET_FAILURE = 0, 1, 2
IV_REASONS = {NO_IMPLIED_VOL: "no implied vol", BRACKET_FAILURE: "bracket failure"}


@dataclass(frozen=True)
class IvConfig:
    lo: float = 1e-4
    hi: float = 5.0
    tol: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        if not 0 < self.lo < self.hi:
            raise ValueError("need 0 < lo < hi")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "IvConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown IV config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def bs_price_arrays(sigma, m, tau, r, is_call):
    sigma, m, tau, r, is_call = np.broadcast_arrays(
        np.asarray(sigma, float), np.asarray(m, float), np.asarray(tau, float),
        np.asarray(r, float), np.asarray(is_call, bool))
    sq = sigma * np.sqrt(tau)
    d1 = (np.log(m) + (r + 0.5 * sigma * sigma) * tau) / sq
    d2 = d1 - sq
    disc = np.exp(-r * tau)
    call = m * ndtr(d1) - disc * ndtr(d2)
    put = disc * ndtr(-d2) - m * ndtr(-d1)
    return np.where(is_call, call, put)


def bs_price(sigma: float, quote: Quote) -> float:
    """Black-Scholes value of ``quote`` at volatility ``sigma``."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return float(bs_price_arrays(sigma, quote.moneyness, quote.tau, quote.rate, quote.kind.value == "call"))


def arbitrage_bounds(m, tau, r, is_call):
    """Lower (intrinsic) and upper no-arbitrage bounds on the option value."""
    disc = np.exp(-r * tau)
    lower = np.where(is_call, np.maximum(m - disc, 0.0), np.maximum(disc - m, 0.0))
    upper = np.where(is_call, m, disc)
    return lower, upper


def brent_vec(f, lo, hi, f_lo, f_hi, xtol, rtol=4 * np.finfo(float).eps, max_iter=200):
    """Brent root search, elementwise over arrays of brackets.

    ``f(x, idx)`` evaluates the function for the rows ``idx`` only.
    Brackets must already satisfy ``f_lo * f_hi <= 0``. Returns
    ``(roots, converged)``.
    """
    xpre, xcur = np.array(lo, float), np.array(hi, float)
    fpre, fcur = np.array(f_lo, float), np.array(f_hi, float)
    n = xcur.size
    xblk = np.zeros(n)
    fblk = np.zeros(n)
    spre = np.zeros(n)
    scur = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    done |= fpre == 0.0
    xcur = np.where(fpre == 0.0, xpre, xcur)
    fcur = np.where(fpre == 0.0, 0.0, fcur)
    done |= fcur == 0.0

    for _ in range(max_iter):
        act = ~done
        if not act.any():
            break
        flip = act & (fpre * fcur < 0)
        xblk = np.where(flip, xpre, xblk)
        fblk = np.where(flip, fpre, fblk)
        spre = np.where(flip, xcur - xpre, spre)
        scur = np.where(flip, xcur - xpre, scur)

        swap = act & (np.abs(fblk) < np.abs(fcur))
        xpre = np.where(swap, xcur, xpre)
        xcur = np.where(swap, xblk, xcur)
        xblk = np.where(swap, xpre, xblk)
        fpre = np.where(swap, fcur, fpre)
        fcur = np.where(swap, fblk, fcur)
        fblk = np.where(swap, fpre, fblk)

        delta = 0.5 * (xtol + rtol * np.abs(xcur))
        sbis = 0.5 * (xblk - xcur)
        done |= act & ((fcur == 0.0) | (np.abs(sbis) < delta))
        act = ~done
        if not act.any():
            break

        with np.errstate(divide="ignore", invalid="ignore"):
            interp = act & (np.abs(spre) > delta) & (np.abs(fcur) < np.abs(fpre))
            secant = xpre == xblk
            stry_sec = -fcur * (xcur - xpre) / (fcur - fpre)
            dpre = (fpre - fcur) / (xpre - xcur)
            dblk = (fblk - fcur) / (xblk - xcur)
            stry_iqi = -fcur * (fblk * dblk - fpre * dpre) / (dblk * dpre * (fblk - fpre))
            stry = np.where(secant, stry_sec, stry_iqi)
            accept = interp & np.isfinite(stry) & (2.0 * np.abs(stry) < np.minimum(np.abs(spre), 3.0 * np.abs(sbis) - delta))
        spre = np.where(act, np.where(accept, scur, sbis), spre)
        scur = np.where(act, np.where(accept, stry, sbis), scur)

        xpre = np.where(act, xcur, xpre)
        fpre = np.where(act, fcur, fpre)
        step = np.where(np.abs(scur) > delta, scur, np.where(sbis > 0, delta, -delta))
        xcur = np.where(act, xcur + step, xcur)
        idx = np.flatnonzero(act)
        fcur[idx] = f(xcur[idx], idx)
    return xcur, done


def implied_vol_arrays(price, m, tau, r, is_call, cfg: IvConfig = IvConfig()):
    """Vectorized implied volatility. Returns ``(sigma, status)``; failed
    entries are NaN with status :data:`NO_IMPLIED_VOL` or
    :data:`BRACKET_FAILURE`."""
    price, m, tau, r, is_call = (np.array(a, dtype=t) for a, t in zip(
        np.broadcast_arrays(price, m, tau, r, is_call), (float, float, float, float, bool)))
    shape = price.shape
    price, m, tau, r, is_call = (a.reshape(-1) for a in (price, m, tau, r, is_call))
    n = price.size
    status = np.zeros(n, dtype=np.int8)
    lower, upper = arbitrage_bounds(m, tau, r, is_call)
    inside = np.isfinite(price) & (price > lower) & (price < upper)
    status[~inside] = NO_IMPLIED_VOL

    def f(x, idx):
        return bs_price_arrays(x, m[idx], tau[idx], r[idx], is_call[idx]) - price[idx]

    all_idx = np.arange(n)
    lo = np.full(n, cfg.lo)
    hi = np.full(n, cfg.hi)
    f_lo = f(lo, all_idx)
    f_hi = f(hi, all_idx)
    # one automatic doubling of the upper bracket
    short = inside & (f_hi < 0)
    if short.any():
        hi[short] *= 2.0
        f_hi[short] = f(hi[short], np.flatnonzero(short))
    bracketed = inside & (f_lo <= 0) & (f_hi >= 0)
    status[inside & ~bracketed] = BRACKET_FAILURE

    sigma = np.full(n, np.nan)
    idx = np.flatnonzero(bracketed)
    if idx.size:
        root, conv = brent_vec(lambda x, j: f(x, idx[j]), lo[idx], hi[idx], f_lo[idx], f_hi[idx],
                               xtol=cfg.tol, max_iter=cfg.max_iter)
        sigma[idx] = np.where(conv, root, np.nan)
        status[idx[~conv]] = BRACKET_FAILURE
    return sigma.reshape(shape), status.reshape(shape)


def implied_vol(price: float, quote: Quote, cfg: IvConfig = IvConfig()) -> float:
    """Black-Scholes implied volatility of a strike-normalized price."""
    sigma, status = implied_vol_arrays(price, quote.moneyness, quote.tau, quote.rate,
                                       quote.kind.value == "call", cfg)
    if status != IV_OK:
        raise ImpliedVolError(IV_REASONS[int(status)])
    return float(sigma)
