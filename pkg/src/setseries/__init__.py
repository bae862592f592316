"""Set-based classification of irregularly sampled, non-synchronized time series."""

from .data import (
    Dataset,
    DatasetMeta,
    Observation,
    SyntheticSpec,
    TimeSeriesSet,
    balanced_batches,
    fit_normalization,
    generate_synthetic,
    inject_static_observations,
    normalize,
    parse_dataset,
    save_dataset,
    split_stratified,
)
from .encoding import TimeEncodingSpec, featurize, time_encode
from .errors import SetSeriesError
from .metrics import EvalReport, ScoredLabels, accuracy, auprc, auroc, balanced_accuracy
from .model import (
    ModelSpec,
    attend_aggregate,
    attention_weights,
    forward,
    forward_with_trace,
    init_params,
    loss_gradient,
)
from .attention import AttentionSpec, AttentionTrace, export_attention
from .numerics import (
    AdamState,
    MlpSpec,
    Tape,
    adam_step,
    backward,
    compensated_sum,
    init_adam,
    mlp_forward,
    softmax_stable,
)
from .online import OnlineState, online_ingest, online_init, online_predict, online_restore
from .setfunction import SetFunctionSpec, aggregate
from .training import (
    Checkpoint,
    EarlyStopper,
    SearchSpace,
    TrainConfig,
    bce_loss,
    build_model,
    evaluate,
    hypersearch,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
