"""Heston/Bates calibration toolkit: COS pricing, implied vols, an MLP
surrogate and Differential Evolution."""

__version__ = "0.1.0"

from .bsiv import IvConfig, bs_price, implied_vol
from .calibrate import (CalibrationProblem, CalibrationResult, CosBrentBackend, SensitivityReport,
                        SurrogateBackend, calibrate, hessian, landscape, objective, synth_market)
from .cos import CosConfig, cos_price, price_surface
from .datagen import Dataset, SamplingRange, build_dataset, lhs_sample, split_dataset
from .de import DEConfig, Population, de_minimize
from .models import BatesParams, HestonParams, OptionKind, Quote, QuoteSurface, ValueKind, bates_cf, heston_cf
from .nnet import Network, NetworkSpec, TrainConfig, evaluate, forward, load_weights, save_weights, train

__all__ = [
    "BatesParams", "CalibrationProblem", "CalibrationResult", "CosBrentBackend", "CosConfig", "DEConfig",
    "Dataset", "HestonParams", "IvConfig", "Network", "NetworkSpec", "OptionKind", "Population", "Quote",
    "QuoteSurface", "SamplingRange", "SensitivityReport", "SurrogateBackend", "TrainConfig", "ValueKind",
    "bates_cf", "bs_price", "build_dataset", "calibrate", "cos_price", "de_minimize", "evaluate", "forward",
    "heston_cf", "hessian", "implied_vol", "landscape", "lhs_sample", "load_weights", "objective",
    "price_surface", "save_weights", "split_dataset", "synth_market", "train",
]
