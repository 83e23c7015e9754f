"""Simulation toolkit for neural networks on analog memory arrays."""

__version__ = "0.1.0"

from .crossbar import (Approach, CrossbarState, TuneReport, TuningConfig, error_stats, init_crossbar, pseudo_image,
                       tune_crossbar, write_verify_device)
from .defects import FaultKind, FaultMap, compensate_average_error, inject_faults, pair_retune
from .device_models import (DeviceModelRegressor, DomainError, FitError, FitResult, MeasurementTable, ModelShape,
                            NonlinearityModel, RetentionProjector, SwitchingModel, Technology, TemperatureModel,
                            default_model_set, fit_model, nl_error, project_retention, pulse_response,
                            temp_weight_shift)
from .imperfections import Faults, ImperfectionStack, Noise, StaticNonlinearity, TempShift, TuningError
from .mapping import MappingConfig, PairMapper, Scheme, StateOptRule, default_mapping, map_weight, unmap_pair
from .network import (MiniConvNetClassifier, Network, build_mini_convnet, evaluate_accuracy_drop, make_blob_dataset,
                      train)
from .noise import LayerNoiseConfig, energy_report, optimize_dynamic_range, snr_optimize
from .thermal import (BnBank, TempSchedule, calibrate_bn_bank, select_bn, state_opt_search, temperature_drops,
                      train_with_temp_sweep)

__all__ = [
    "Approach", "BnBank", "CrossbarState", "DeviceModelRegressor", "DomainError", "FaultKind", "FaultMap", "Faults",
    "FitError", "FitResult", "ImperfectionStack", "LayerNoiseConfig", "MappingConfig", "MeasurementTable",
    "MiniConvNetClassifier", "ModelShape", "Network", "Noise", "NonlinearityModel", "PairMapper",
    "RetentionProjector", "Scheme", "StateOptRule", "StaticNonlinearity", "SwitchingModel", "Technology",
    "TempSchedule", "TempShift", "TemperatureModel", "TuneReport", "TuningConfig", "TuningError",
    "build_mini_convnet", "calibrate_bn_bank", "compensate_average_error", "default_mapping", "default_model_set",
    "energy_report", "error_stats", "evaluate_accuracy_drop", "fit_model", "init_crossbar", "inject_faults",
    "make_blob_dataset", "map_weight", "nl_error", "optimize_dynamic_range", "pair_retune", "project_retention",
    "pseudo_image", "pulse_response", "select_bn", "snr_optimize", "state_opt_search", "temp_weight_shift",
    "temperature_drops", "train", "train_with_temp_sweep", "tune_crossbar", "unmap_pair", "write_verify_device",
]
