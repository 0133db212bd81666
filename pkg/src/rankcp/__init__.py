"""Rank-based conformal prediction for graph node classification.

The package bundles a small reverse-mode autodiff tape over dense float64
matrices (:mod:`rankcp.tensor`), graph I/O and synthetic SBM graphs
(:mod:`rankcp.graph`), GCN base and correction models (:mod:`rankcp.gcn`),
hard split-conformal calibration with THR, APS and RANK scores
(:mod:`rankcp.conformal`), differentiable set-size losses
(:mod:`rankcp.smooth`) and the experiment driver (:mod:`rankcp.pipeline`).
"""
from .config import ExperimentConfig, load_config
from .conformal import (PredictionSetBatch, RankCalibration, ScoreKind, build_sets, calibrate,
                        coverage, fit_rank_calibration, inefficiency)
from .exceptions import (CalibrationError, DivergenceError, LeakageError, NonFiniteError,
                         RankCPError, ShapeError)
from .graph import Graph, NodeSplit, generate_sbm, load_dataset, normalized_adjacency, split_nodes
from .pipeline import (MetricsRecord, evaluate, run_ablation, run_conformal_training,
                       run_experiment, run_once)
from .tensor import Tape, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "DivergenceError",
    "ExperimentConfig",
    "Graph",
    "LeakageError",
    "MetricsRecord",
    "NodeSplit",
    "NonFiniteError",
    "PredictionSetBatch",
    "RankCPError",
    "RankCalibration",
    "ScoreKind",
    "ShapeError",
    "Tape",
    "backward",
    "build_sets",
    "calibrate",
    "coverage",
    "evaluate",
    "fit_rank_calibration",
    "generate_sbm",
    "grad_check",
    "inefficiency",
    "load_config",
    "load_dataset",
    "normalized_adjacency",
    "run_ablation",
    "run_conformal_training",
    "run_experiment",
    "run_once",
    "split_nodes",
]
