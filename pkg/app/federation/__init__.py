from app.federation.costs import (
    MemoryModel,
    Workload,
    device_profile,
    execution_time,
    feasible_cuts,
    time_breakdown,
)
from app.federation.data import Dataset, load_csv, save_csv, synthetic_task
from app.federation.fedavg import data_weights, fedavg
from app.federation.partition import dirichlet_partition, iid_partition
from app.federation.simulator import (
    ClientState,
    FederationState,
    TrainResult,
    evaluate,
    init_federation,
    load_datasets,
    partition_clients,
    run_round,
    train,
    write_metrics,
)


__all__ = [
    "MemoryModel",
    "Workload",
    "device_profile",
    "execution_time",
    "feasible_cuts",
    "time_breakdown",
    "Dataset",
    "load_csv",
    "save_csv",
    "synthetic_task",
    "data_weights",
    "fedavg",
    "dirichlet_partition",
    "iid_partition",
    "ClientState",
    "FederationState",
    "TrainResult",
    "evaluate",
    "init_federation",
    "load_datasets",
    "partition_clients",
    "run_round",
    "train",
    "write_metrics",
]
