"""Rebalanced sub-domain alignment for unsupervised domain adaptation.

A library and CLI implementing class-conditional domain alignment under
label shift: entropic optimal-transport distances with exact small-scale
oracles, estimators for the sub-domain generalization-bound terms, the
four training losses with hand-written gradients, and the full
pretrain-then-align training loop, validated on synthetic
shifted-class-distribution tasks.
"""

from .bounds import (
    BoundReport,
    SubdomainPartition,
    bound_report,
    check_decomposition,
    delta_c,
    source_risk,
    split_by_class,
    subdomain_risks,
)
from .nn import (
    GradientBlowupError,
    Layer,
    LossBundle,
    NetworkParams,
    backward,
    cross_entropy,
    forward,
    init_network,
    loss_classification_weighted,
    loss_discrepancy_weighted,
    loss_inter,
    loss_intra,
    sgd_momentum_step,
    zero_velocity,
)
from .ot import (
    GaussianComponent,
    GaussianMixture,
    SinkhornDivergenceError,
    TransportPlan,
    euclidean_cost_matrix,
    gaussian_w2,
    mw1_gmm,
    ot_exact_discrete,
    pairwise_component_w1,
    sample_gmm,
    sinkhorn,
    w1_empirical,
    w1_exact_1d,
    weighted_subdomain_w1,
)
from .synthdata import Dataset, make_figure1_task, make_shifted_gmm, resample_with_props
from .training import (
    DarsaConfig,
    DarsaModels,
    EpochRecord,
    TrainMetrics,
    TrainingError,
    estimate_target_weights,
    fit,
    predict,
    pretrain,
)
from .weights import ClassWeights

__version__ = "0.1.0"
