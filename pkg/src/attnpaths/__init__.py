"""Bayesian theory of deep multi-head linear-value attention, organized by attention paths.

A path picks one head per layer; the network output decomposes into a sum of
per-path linear predictors, the Bayesian posterior over readout weights is a
kernel machine built from path features, and the finite-width posterior is
characterized by a path-pair order parameter solved from a saddle-point action.
"""

from .paths import (
    enumerate_paths,
    flat_index,
    path_from_flat,
    extend_order_parameter,
    paths_through_head,
)
from .model import (
    AttentionSpec,
    Readout,
    NetworkWeights,
    attention_matrix,
    attention_stack,
    attentioned_input,
    effective_weights,
    network_output,
    forward_layerwise,
)
from .kernel import (
    PathFeatureMatrix,
    KernelMatrix,
    compute_features,
    path_pair_kernel,
    total_kernel,
    kernel_blocks,
    kernel_task_alignment,
)
from .solver import (
    OrderParameterSet,
    SolverConfig,
    SolveTrace,
    SolverFailure,
    entropy_term,
    energy_term,
    action,
    action_gradient,
    solve_saddle,
)
from .predictor import (
    PredictorReport,
    SweepResult,
    predictor_mean,
    predictor_variance,
    classification_accuracy,
    evaluate_predictor,
    temperature_sweep,
)
from .analysis import (
    HeadScoreTable,
    head_scores,
    prune_heads,
    gp_vs_renormalized,
)
from .data import (
    HmcTaskConfig,
    OneShotConfig,
    SequenceDataset,
    state_vectors,
    sample_hidden_chain,
    gen_hmc_dataset,
    build_good_heads,
    build_random_head,
    build_hmc_attention,
    build_one_shot_sequences,
)
from .sampler import (
    HmcConfig,
    PosteriorSamples,
    log_posterior,
    leapfrog,
    run_hmc,
    hmc_sample,
    empirical_order_parameter,
    empirical_predictor,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
