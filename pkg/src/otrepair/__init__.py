"""Desk-scale lab for data-free backdoor repair.

Train a small backdoored classifier on synthetic data, expose backdoor
neurons by unlearning generated noise, prune them, and recover accuracy by
optimal-transport fusion of the pruned and backdoored models.
"""

from .data import (
    Dataset,
    NoiseBatchSpec,
    PoisonSpec,
    apply_trigger,
    gen_noise_batch,
    gen_synthetic,
    load_dataset,
    make_asr_testset,
    make_blend_pattern,
    poison,
    save_dataset,
)
from .fusion import (
    AlignmentTrace,
    FusionConfig,
    FusionResult,
    align_and_fuse,
    build_marginals,
    fuse_models,
    vanilla_fuse,
    weight_norm_report,
)
from .nn import (
    Conv2D,
    Dense,
    Flatten,
    Model,
    NeuronView,
    ReLU,
    TrainConfig,
    apply_view,
    clone_model,
    forward,
    load_model,
    neuron_view,
    save_model,
    sgd_step,
    train,
)
from .otsolve import TransportPlan, check_plan, solve_exact, solve_sinkhorn
from .tensors import Rng, matmul, pairwise_sq_euclidean, row_l1_distance
from .unlearn import (
    CorrelationReport,
    NwcReport,
    PruneResult,
    UnlearnConfig,
    compute_nwc,
    nwc_correlation,
    prune_top_gamma,
    random_unlearn,
    spearman,
    unlearn_on_samples,
)

__version__ = "0.1.0"
