"""Joint conformal treatment-effect intervals and subgroup discovery for multi-outcome RCTs."""

from .conformal import IteBands, band_samples, fit_and_band, ite_interval, recalibrate_subgroup
from .core import ExperimentConfig, Interval, RngStream, TrialDataset, read_dataset_csv, write_dataset_csv
from .datagen import ResponseSurfaceSpec, SyntheticSpec, gen_response_surface, gen_synthetic, load_covariates
from .estimator import MOPJCI
from .forest import QuantileForestRegressor, RandomForestRegressor
from .metrics import MetricsReport, coverage_joint, pehe, v_across, v_within
from .partition import PartitionTree, assign_group, best_split, group_criterion, partition
from .runner import ExperimentPlan, run_experiment, subgroup_table, sweep

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "ExperimentPlan", "Interval", "IteBands", "MOPJCI", "MetricsReport", "PartitionTree",
    "QuantileForestRegressor", "RandomForestRegressor", "ResponseSurfaceSpec", "RngStream", "SyntheticSpec",
    "TrialDataset", "assign_group", "band_samples", "best_split", "coverage_joint", "fit_and_band",
    "gen_response_surface", "gen_synthetic", "group_criterion", "ite_interval", "load_covariates", "partition",
    "pehe", "read_dataset_csv", "recalibrate_subgroup", "run_experiment", "subgroup_table", "sweep",
    "v_across", "v_within", "write_dataset_csv",
]
