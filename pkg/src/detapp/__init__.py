"""Denoised few-shot task adaptation over patch-grid surrogates of images."""
from .adapt import AdaptConfig, adapt_task
from .bench import BenchConfig, run_benchmark
from .cora import compute_region_weights
from .infer import local_ncc_predict, ncc_predict, predict_queries
from .synth import GenConfig, generate_episode

__version__ = "0.1.0"

__all__ = ["AdaptConfig", "BenchConfig", "GenConfig", "adapt_task", "compute_region_weights",
           "generate_episode", "local_ncc_predict", "ncc_predict", "predict_queries", "run_benchmark"]
