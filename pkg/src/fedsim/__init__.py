"""Deterministic federated-learning simulator with coreset straggler mitigation."""

from .coreset import (
    Coreset,
    DistMatrix,
    budget,
    coreset_error,
    coreset_weights,
    dist_euclid_proxy,
    dist_exact,
    dist_lastlayer_proxy,
    kmedoids,
)
from .data import (
    ClientDataset,
    FederatedDataset,
    generate_synthetic,
    load_dataset,
    load_mnist_idx,
    partition_label_shards,
    save_dataset,
)
from .federation import (
    ClientProfile,
    CoresetBuilder,
    LrSpec,
    RoundConfig,
    RunLog,
    capabilities,
    build_profiles,
    client_round_time,
    deadline_for_stragglers,
    run,
    run_round,
    select_clients,
    write_metrics_csv,
    write_run_json,
)
from .models import (
    ModelSpec,
    ParamVector,
    WeightedView,
    evaluate,
    init_params,
    last_layer_input_grad,
    per_sample_grad,
    per_sample_loss,
    sgd_epoch,
)

__version__ = "0.1.0"
