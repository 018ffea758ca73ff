"""Frequency-security and under-frequency load-shedding workbench."""

__version__ = "0.1.0"

from .grid_model import (Network, PowerFlowDiverged, build_admittance, graph_shift_operator, kron_reduce,
                         load_case, solve_power_flow)
from .dynamics_sim import (Contingency, TrajectoryRecord, build_dynamic_system, frequency_nadir, integrate_swing,
                           is_secure, load_contingencies, run_fsa_tds, single_machine)
from .scenario_lab import LabeledDataset, generate_dataset, mask_buses, sample_operating_point, split_dataset
from .fsa_classifiers import aggregate_signal, evaluate, load_classifier, predict, save_classifier, train_classifier
from .ufls_env import ClassifierBackend, TdsBackend, UflsEnv, combined_reward, select_shed_buses
from .sac_agent import SacConfig, evaluate_safety, sample_action, train

__all__ = [
    "Network", "PowerFlowDiverged", "build_admittance", "graph_shift_operator", "kron_reduce", "load_case",
    "solve_power_flow", "Contingency", "TrajectoryRecord", "build_dynamic_system", "frequency_nadir",
    "integrate_swing", "is_secure", "load_contingencies", "run_fsa_tds", "single_machine", "LabeledDataset",
    "generate_dataset", "mask_buses", "sample_operating_point", "split_dataset", "aggregate_signal", "evaluate",
    "load_classifier", "predict", "save_classifier", "train_classifier", "ClassifierBackend", "TdsBackend",
    "UflsEnv", "combined_reward", "select_shed_buses", "SacConfig", "evaluate_safety", "sample_action", "train",
]
