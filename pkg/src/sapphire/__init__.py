"""Preconditioned variance-reduced solvers for regularized empirical risk minimization."""

from .data import Dataset, load_libsvm, make_synthetic, normalize_rows, parse_libsvm, train_test_split
from .losses import GlmLoss
from .regularizers import L1, MCP, SCAD, NoPenalty, make_regularizer
from .solver import SolverConfig, SolverResult, prox_svrg_run, saga_run, sapphire_run

__version__ = "0.1.0"
