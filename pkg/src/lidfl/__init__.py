"""Deterministic simulator for list-decodable federated learning.

A central server keeps a short list of candidate models instead of a single
one; each round it extends the list with one (possibly Byzantine) client
update and prunes the least-voted candidate. With a list of size at least
floor(1/gamma), one honest lineage survives any Byzantine fraction, even a
majority. The package bundles the protocol engine, the attack catalog,
baseline robust aggregators, and Monte Carlo checks of the convergence
theory.
"""
from .aggregators import (
    AggregatorKind,
    agg_cwm,
    agg_gm,
    agg_mean,
    agg_meb,
    agg_norm,
    agg_rknn,
)
from .analysis import (
    EnvelopeParams,
    EnvelopeReport,
    FailureReport,
    FailureTrialConfig,
    check_envelope,
    contraction_factor,
    estimate_f_star,
    simulate_failure_rate,
    summarize_sweep,
)
from .attacks import (
    AttackKind,
    OmniscientView,
    build_omniscient_view,
    craft_epr,
    craft_gauss,
    craft_lie,
    craft_omn,
    craft_sf,
)
from .core import RngStream, derive_stream, l2_norm, vec_axpy
from .data import DatasetConfig, Partition, flip_labels, generate, load_csv, partition
from .engine import (
    ClientSpec,
    RoundRecord,
    RunConfig,
    RunResult,
    evaluate_list,
    records_to_csv,
    run_baseline,
    run_lidfl,
    run_lidfl_agg,
    setup_clients,
)
from .models import (
    Batch,
    LabeledExample,
    LossProfile,
    ModelSpec,
    accuracy,
    estimate_loss_profile,
    gradient,
    gradient_descent,
    loss,
    smoothness_bound,
)
from .trainer import LocalTrainConfig, batch_schedule, local_update, momentum_sgd
from .voting import (
    ValidationOracle,
    byzantine_vote,
    estimate_loss,
    honest_vote,
    noisy_estimate,
    tally_and_prune,
    tally_votes,
)

__version__ = "0.1.0"
