"""Single-process simulator for federated learning over partially shared
tabular feature spaces: FedAvg on the shared columns, the CHFL two-column
method with lateral connections, and the local / concat baselines, plus the
experiment harness that drives them."""

from .columns import (
    ChflClientModel,
    LateralSet,
    chfl_backward_unique,
    chfl_forward,
    chfl_model_init,
    common_logits,
    lateral_init,
    load_model,
    save_model,
)
from .data import (
    ClientDataset,
    FeatureSplitPlan,
    RawDataset,
    build_client_datasets,
    correlation_score,
    gen_synthetic,
    load_csv,
    make_feature_split,
    partition_samples,
    select_split_by_correlation,
    split_train_val_test,
    standardize,
)
from .federation import (
    FederationConfig,
    Method,
    aggregate,
    client_local_chfl,
    client_local_fedavg,
    run_chfl,
    run_concat_baseline,
    run_fedavg,
    run_local_baseline,
    run_method,
)
from .harness import (
    ExperimentSpec,
    MetricsRecord,
    MethodSummary,
    load_spec,
    run_experiment,
    sweep_clients,
    sweep_ratio,
    tune_mu,
)
from .nn import (
    AdamState,
    DenseLayer,
    ForwardCache,
    MlpParams,
    adam_init,
    adam_step,
    finite_diff_grad,
    mlp_backward,
    mlp_forward,
    mlp_init,
    onehot_encode,
    softmax,
    softmax_cross_entropy,
)

__version__ = "0.1.0"
