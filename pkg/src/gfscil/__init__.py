"""Inductive graph few-shot class-incremental node classification.

A from-scratch graph-attention backbone with reverse-mode autodiff, a
cosine-prototype classifier trained with a margin loss, triple-branch
multi-topology class augmentation for the base session, and per-session
prototype calibration/shift for incremental learning, plus an evaluation
harness with baselines and a CLI (`gfscil`).
"""

from .autodiff import ParamStore, Tape, finite_difference_check
from .encoder import EncoderConfig, adam_step, add_projection_head, ema_update, embed, encode, init_params
from .graph import (
    SparseGraph,
    build_graph,
    identity_adjacency,
    inject_link_noise,
    restrict_to_sessions,
    sever_to_class_subset,
)
from .harness import (
    METHODS,
    MethodSpec,
    RunSummary,
    SessionReport,
    SplitConfig,
    emit_plot_data,
    emit_report,
    evaluate,
    run_baseline,
    run_method,
    split_dataset,
    summarize,
    synth_sbm,
)
from .incremental import (
    IncrementalConfig,
    SessionState,
    ipcn_calibrate,
    ipcn_probabilities,
    ipcn_refine,
    pso_shift,
    run_session,
)
from .prototypes import LossConfig, PrototypeBank, classify, compute_prototypes, margin_loss, predict_proba
from .sessions import SessionDataset, TrainView
from .tmca import BaseTrainConfig, count_arrangements, make_tfa, make_tva, train_base

__version__ = "0.1.0"
