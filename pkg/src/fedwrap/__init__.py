"""fedwrap: convert an existing, already-trained classifier into a federated
one by wrapping it, without retraining from scratch.

Two strategies are provided. The stacking wrapper trains one shared
translator per federation on raw inputs concatenated with local-model
features, combined across clients by federated averaging. The bagging
wrapper exchanges serialized model snapshots between peers and fits a local
linear fusion over all members' predictions. An output aggregator blends the
local and federated predictions; at weight zero the wrapped system is the
original model, untouched.
"""

from .data import (
    Dataset,
    Partition,
    PartitionSpec,
    class_histogram,
    load_csv,
    partition_bank,
    partition_dataset,
    partition_imbalanced,
    partition_noniid,
    split_test,
)
from .errors import FedwrapError
from .federation import ClientUpdate, FederationPlan, fedavg_aggregate, fedavg_from_scratch, run_round_loop
from .metrics import ConfusionMatrix, MetricsReport, aggregate_clients, confusion, metrics_from_confusion
from .models import (
    ForwardResult,
    Model,
    ModelSpec,
    TrainHp,
    deserialize_model,
    forward,
    forward_batch,
    grad,
    init_model,
    serialize_model,
    sgd_train,
)
from .runtime import join, serve, simulate
from .wrapper import (
    BaggingState,
    FeatureMode,
    LocalModelHandle,
    StackingState,
    WrapperConfig,
    aggregate_outputs,
    bagging_fit,
    bagging_init,
    bagging_predict,
    build_stacking_input,
    handle_from_model,
    stacking_predict,
    stacking_train_round,
    wrapper_infer,
)

__version__ = "0.1.0"
