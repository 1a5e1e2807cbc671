"""Federated learning simulator: FedAVG, TEFL, AFL and TWAFL on dense networks."""

from .aggregation import (
    ClientUploadView, fedavg_aggregate, temporal_weight, temporally_weighted_aggregate,
)
from .data import (
    ClientDataset, DataPool, PartitionSpec, generate_all_clients, generate_class_counts,
    load_idx, materialize, synthetic_pool,
)
from .metrics import (
    RoundRecord, RunSummary, global_loss, relative_cost, round_cost, rounds_to_accuracy,
    summarize_run, summarize_runs,
)
from .model import (
    Batch, LayerDesc, ModelSpec, client_sgd, forward, init_params, loss_and_grad, param_count,
)
from .params import LayeredParams, ParamBlock, linear_combine, partition_sizes
from .protocol import (
    ProtocolConfig, ServerState, es_rounds_for_freq, flag_for_round, run_experiment, run_round,
    select_clients, simulate,
)

__version__ = "0.1.0"
