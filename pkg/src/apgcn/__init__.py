"""Node classification with per-node adaptive propagation depth."""

from ._kernels import BACKEND as kernel_backend
from .graph import (GraphBundle, GraphError, PropagationOperator, build_graph,
                    build_operator, l1_normalize_features,
                    largest_connected_component, propagate, sample_edge_dropout)
from .model import (HaltingConfig, HaltingTrace, ModelParams, adaptive_backward,
                    adaptive_forward, halting_probability, penalized_loss,
                    propagate_fixed, seed_embeddings)
from .training import TrainConfig, evaluate, train
from .protocol import (ExperimentPlan, RunResult, Splits, bootstrap_ci,
                       make_splits, run_grid, sweep_alpha, sweep_train_size)
from .dataio import (SbmSpec, generate_sbm, ingest_text, load_bundle,
                     read_bundle, save_bundle, write_bundle)

__version__ = "0.1.0"
