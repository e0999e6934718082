"""Training data for the IV surrogate: LHS over parameter ranges, COS put
prices, Brent implied vols, CSV persistence with a JSON metadata sidecar."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bsiv import IV_OK, IvConfig, implied_vol_arrays
from .cos import OK, CosConfig, price_grid
from .errors import DatasetError
from .models import HESTON_NAMES, JUMP_NAMES, ModelKind
from .sampling import latin_hypercube

log = logging.getLogger(__name__)

QUOTE_COLUMNS = ("m", "tau", "r")
PRICE_RANGE = (0.0, 0.6)
IV_RANGE = (0.0, 0.76)
_HALF_OPEN_EPS = 1e-6
_CHUNK = 4096


@dataclass(frozen=True)
class Dimension:
    name: str
    low: float
    high: float
    low_open: bool = False
    high_open: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"range for {self.name}: low must be < high")

    def effective(self) -> tuple[float, float]:
        span = self.high - self.low
        lo = self.low + _HALF_OPEN_EPS * span if self.low_open else self.low
        hi = self.high - _HALF_OPEN_EPS * span if self.high_open else self.high
        return lo, hi

    def to_dict(self) -> dict:
        return {"name": self.name, "low": self.low, "high": self.high,
                "low_open": self.low_open, "high_open": self.high_open}


HESTON_DIMENSIONS = (
    Dimension("m", 0.6, 1.4),
    Dimension("tau", 0.05, 3.0),
    Dimension("r", 0.0, 0.05),
    Dimension("rho", -0.90, 0.0),
    Dimension("kappa", 0.0, 3.0, low_open=True),
    Dimension("gamma", 0.01, 0.8, low_open=True),
    Dimension("nu_bar", 0.01, 0.5, low_open=True),
    Dimension("nu0", 0.05, 0.5, low_open=True),
)
# narrower than the 8-parameter calibration box: the full box pushes about
# half of all samples outside the IV envelope
JUMP_DIMENSIONS = (
    Dimension("lambda_j", 0.0, 1.5),
    Dimension("mu_j", 0.0, 0.2),
    Dimension("nu_j_sq", 0.0, 0.16),
)


@dataclass(frozen=True)
class SamplingRange:
    dims: tuple[Dimension, ...] = HESTON_DIMENSIONS

    def __post_init__(self):
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError("duplicate dimension names")

    @classmethod
    def default(cls, model: ModelKind | str = ModelKind.HESTON) -> "SamplingRange":
        if ModelKind(model) is ModelKind.HESTON:
            return cls(HESTON_DIMENSIONS)
        return cls(HESTON_DIMENSIONS + JUMP_DIMENSIONS)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dims)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = zip(*(d.effective() for d in self.dims))
        return np.array(lo), np.array(hi)

    def to_list(self) -> list[dict]:
        return [d.to_dict() for d in self.dims]

    @classmethod
    def from_list(cls, items) -> "SamplingRange":
        return cls(tuple(Dimension(**d) for d in items))

    def replace(self, **ranges) -> "SamplingRange":
        """Copy with some dimensions re-bounded, e.g. ``tau=(0.05, 0.05 + 1e-9)``."""
        dims = []
        for d in self.dims:
            if d.name in ranges:
                lo, hi = ranges[d.name]
                dims.append(Dimension(d.name, lo, hi))
            else:
                dims.append(d)
        return SamplingRange(tuple(dims))


def input_columns(model: ModelKind | str) -> tuple[str, ...]:
    names = QUOTE_COLUMNS + HESTON_NAMES
    return names + JUMP_NAMES if ModelKind(model) is ModelKind.BATES else names


def lhs_sample(ranges: SamplingRange, n: int, seed: int) -> np.ndarray:
    """``n`` Latin hypercube points scaled to ``ranges`` (one column per
    dimension)."""
    lo, hi = ranges.bounds()
    u = latin_hypercube(n, len(ranges.dims), np.random.default_rng(seed))
    return lo + u * (hi - lo)


@dataclass
class Dataset:
    model: ModelKind
    columns: tuple[str, ...]
    inputs: np.ndarray
    price: np.ndarray
    iv: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.model = ModelKind(self.model)
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(-1, len(self.columns))
        self.price = np.asarray(self.price, dtype=float).reshape(-1)
        self.iv = np.asarray(self.iv, dtype=float).reshape(-1)
        n = self.inputs.shape[0]
        if self.price.shape != (n,) or self.iv.shape != (n,):
            raise ValueError("row count mismatch between inputs, price and iv")
        if "rows" in self.meta and self.meta["rows"] != n:
            raise ValueError(f"metadata row count {self.meta['rows']} != {n} rows")
        self.meta["rows"] = n

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx, **meta) -> "Dataset":
        m = {k: v for k, v in self.meta.items() if k != "rows"}
        m.update(meta)
        return Dataset(self.model, self.columns, self.inputs[idx], self.price[idx], self.iv[idx], m)

    def input_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Sampling bounds stored in the metadata, falling back to the data."""
        if "ranges" in self.meta:
            rng = SamplingRange.from_list(self.meta["ranges"])
            by_name = {d.name: (d.low, d.high) for d in rng.dims}
            lo = np.array([by_name[c][0] for c in self.columns])
            hi = np.array([by_name[c][1] for c in self.columns])
            return lo, hi
        return self.inputs.min(axis=0), self.inputs.max(axis=0)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        header = ",".join(self.columns + ("price", "iv"))
        data = np.column_stack([self.inputs, self.price, self.iv])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
        meta = dict(self.meta, model=self.model.value, columns=list(self.columns), rows=len(self))
        meta_path(path).write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if header[-2:] != ["price", "iv"]:
            raise ValueError(f"{path}: last columns must be price, iv")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        mp = meta_path(path)
        meta = json.loads(mp.read_text()) if mp.exists() else {}
        model = meta.pop("model", ModelKind.BATES.value if "lambda_j" in header else ModelKind.HESTON.value)
        columns = tuple(header[:-2])
        if columns != input_columns(model):
            raise ValueError(f"{path}: unexpected columns {columns}")
        meta.pop("columns", None)
        if data.shape[1] != len(header):
            raise ValueError(f"{path}: expected {len(header)} columns, found {data.shape[1]}")
        return cls(ModelKind(model), columns, data[:, :-2], data[:, -2], data[:, -1], meta)


def meta_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def theta_from_inputs(inputs: np.ndarray, columns) -> np.ndarray:
    """Map dataset input rows to 8-vectors of model parameters."""
    idx = {c: i for i, c in enumerate(columns)}
    theta = np.zeros((inputs.shape[0], 8))
    for j, name in enumerate(HESTON_NAMES + JUMP_NAMES):
        if name in idx:
            theta[:, j] = inputs[:, idx[name]]
    return theta


def label_rows(inputs, columns, cos_cfg: CosConfig, iv_cfg: IvConfig):
    """Put prices and implied vols for dataset input rows.

    Returns ``(price, iv, ok)`` where ``ok`` marks rows that priced,
    inverted, and fall inside the published output envelope.
    """
    idx = {c: i for i, c in enumerate(columns)}
    m, tau, r = (inputs[:, idx[c]] for c in QUOTE_COLUMNS)
    theta = theta_from_inputs(inputs, columns)
    price, pstat = price_grid(theta, m, tau, r, False, cos_cfg)
    iv = np.full(price.shape, np.nan)
    good = pstat == OK
    in_price = good & (price > PRICE_RANGE[0]) & (price < PRICE_RANGE[1])
    if in_price.any():
        iv[in_price], istat = implied_vol_arrays(price[in_price], m[in_price], tau[in_price], r[in_price], False, iv_cfg)
        in_price[np.flatnonzero(in_price)[istat != IV_OK]] = False
    ok = in_price & (iv > IV_RANGE[0]) & (iv < IV_RANGE[1])
    return price, iv, ok


def build_dataset(model: ModelKind | str = ModelKind.HESTON, ranges: SamplingRange | None = None, n: int = 1_000_000,
                  seed: int = 0, cos_cfg: CosConfig = CosConfig(), iv_cfg: IvConfig = IvConfig(),
                  threads: int = 1) -> Dataset:
    """Sample, price and invert ``n`` points; drop rows outside the envelope.

    Row order is the LHS order whatever ``threads`` is.
    """
    model = ModelKind(model)
    ranges = ranges or SamplingRange.default(model)
    columns = input_columns(model)
    if set(ranges.names) != set(columns):
        raise ValueError(f"ranges must cover exactly {columns}")
    x = lhs_sample(ranges, n, seed)
    order = [ranges.names.index(c) for c in columns]
    x = x[:, order]

    chunks = [x[s:s + _CHUNK] for s in range(0, n, _CHUNK)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda c: label_rows(c, columns, cos_cfg, iv_cfg), chunks))
    else:
        results = [label_rows(c, columns, cos_cfg, iv_cfg) for c in chunks]
    price = np.concatenate([r[0] for r in results])
    iv = np.concatenate([r[1] for r in results])
    ok = np.concatenate([r[2] for r in results])

    dropped = int(n - ok.sum())
    if dropped > 0.5 * n:
        raise DatasetError(f"degenerate ranges: {dropped} of {n} samples dropped")
    if dropped:
        log.info("dropped %d of %d samples outside the price/IV envelope", dropped, n)
    meta = {
        "model": model.value,
        "ranges": ranges.to_list(),
        "seed": seed,
        "requested": n,
        "dropped": dropped,
        "cos": cos_cfg.to_dict(),
        "iv": iv_cfg.to_dict(),
    }
    return Dataset(model, columns, x[ok], price[ok], iv[ok], meta)


def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/validation/test partition by seeded shuffle."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr <= 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError("fractions must be three positive numbers summing to 1")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    names = ("train", "val", "test")
    return tuple(ds.subset(np.sort(p), split=name, split_seed=seed) for p, name in zip(parts, names))
