"""Bilevel learning of spatially adaptive TV/TGV denoising weights on dyadic partitions."""

from .bilevel import (
    BilevelConfig,
    OptimizeResult,
    Regularizer,
    TrainingPair,
    optimize_lambda,
    optimize_lambda_batch,
    piggyback_solve,
)
from .denoise_tgv import TGVProblem, solve_tgv
from .denoise_tv import TVProblem, solve_tv
from .image_io import add_gaussian_noise, load_image, save_image
from .partition import BoxConstraint, DyadicCell, DyadicPartition
from .primal_dual import ConvergenceWarning, SolverConfig
from .scheme import SchemeConfig, SchemeResult, run_scheme

__version__ = "0.1.0"

__all__ = [
    "BilevelConfig",
    "BoxConstraint",
    "ConvergenceWarning",
    "DyadicCell",
    "DyadicPartition",
    "OptimizeResult",
    "Regularizer",
    "SchemeConfig",
    "SchemeResult",
    "SolverConfig",
    "TGVProblem",
    "TVProblem",
    "TrainingPair",
    "add_gaussian_noise",
    "load_image",
    "optimize_lambda",
    "optimize_lambda_batch",
    "piggyback_solve",
    "run_scheme",
    "save_image",
    "solve_tgv",
    "solve_tv",
]
