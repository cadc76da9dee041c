"""Sequential split-federated rounds.

Within a round the sampled clients are visited one after another in a seeded
order. Each client runs ``I`` local steps against the shared server state, so
client ``n`` starts from the server adapters and head that client ``n-1`` left
behind. Device adapters start every round from the last aggregate and are
averaged with data weights once all participants are done.

Every message is encoded and decoded through the wire codecs; the byte counts
in :class:`~app.schema.RoundMetrics` are the lengths of those buffers.
"""

import csv
import hashlib
import math
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from app.compression import (
    RefinedActivations,
    cls_scores,
    dequantize,
    grad_scatter,
    pad_server_grad,
    quantize,
    refine,
)
from app.config import RunConfig
from app.exceptions import ConfigError
from app.federation.costs import MemoryModel, Workload, device_profile, execution_time, feasible_cuts
from app.federation.data import Dataset, load_csv, synthetic_task, validate_dataset
from app.federation.fedavg import data_weights, fedavg
from app.federation.partition import dirichlet_partition, iid_partition, shard_sizes
from app.logger import component_logger
from app.model.params import LoraAdapter, SplitModel
from app.model.split import (
    device_backward,
    device_forward,
    init_model,
    server_backward,
    server_forward,
    sgd_step,
    sgd_update,
)
from app.numeric.ops import cross_entropy
from app.numeric.rng import Rng, Stream
from app.schema import DeviceProfile, Pipeline, RoundMetrics
from app.wire import (
    ActivationMeta,
    MessageMeta,
    decode_activations,
    decode_adapters,
    decode_gradient,
    decode_raw_activations,
    encode_activations,
    encode_adapters,
    encode_gradient,
    encode_raw_activations,
)


log = component_logger("federation")


class ClientState(BaseModel):
    id: int
    shard: np.ndarray  # indices into the training set
    adapters: Tuple[LoraAdapter, ...]  # device adapters after the client's last round
    K: int
    profile: DeviceProfile
    memory_budget: Optional[float] = None

    class Config:
        arbitrary_types_allowed = True


class FederationState(BaseModel):
    """Global model (aggregated device adapters + current server state) and clients."""

    model: SplitModel
    clients: List[ClientState]
    train: Dataset
    test: Dataset
    round: int = 0

    class Config:
        arbitrary_types_allowed = True


class TrafficLog(BaseModel):
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    activation_messages: int = 0
    gradient_messages: int = 0
    adapter_messages: int = 0


def server_digest(model: SplitModel) -> str:
    """Short sha256 of the server adapters and head."""
    h = hashlib.sha256()
    for adapter in model.server_adapters:
        h.update(np.ascontiguousarray(adapter.U).tobytes())
        h.update(np.ascontiguousarray(adapter.V).tobytes())
    h.update(np.ascontiguousarray(model.head).tobytes())
    return h.hexdigest()[:16]


def load_datasets(run: RunConfig, rng: Rng) -> Tuple[Dataset, Dataset]:
    data = run.data
    if data.train_path or data.test_path:
        if not (data.train_path and data.test_path):
            raise ConfigError(
                "invalid value for data: train_path and test_path must be given together",
                key="data.train_path",
            )
        return load_csv(data.train_path, run.model), load_csv(data.test_path, run.model)
    return synthetic_task(run.model, data, rng)


def partition_clients(run: RunConfig, train: Dataset) -> List[np.ndarray]:
    """Client shards of ``train`` drawn from the run's partition stream."""
    cfg = run.train
    rng = Rng(run.seed).child(Stream.PARTITION)
    if cfg.iid:
        return iid_partition(len(train), cfg.clients, rng)
    return dirichlet_partition(train.labels, cfg.clients, cfg.dirichlet_alpha, rng)


def init_federation(
    run: RunConfig, train: Optional[Dataset] = None, test: Optional[Dataset] = None
) -> FederationState:
    root = Rng(run.seed)
    model = init_model(run.model, root.child(Stream.INIT))
    if train is None or test is None:
        train, test = load_datasets(run, root.child(Stream.DATA))
    validate_dataset(train, run.model)
    validate_dataset(test, run.model)

    cfg = run.train
    shards = partition_clients(run, train)
    log.info(f"Partitioned {len(train)} samples over {cfg.clients} clients: {shard_sizes(shards)}")

    budgets = cfg.client_budgets or [run.compression.K] * cfg.clients
    clients = []
    for cid, shard in enumerate(shards):
        profile = device_profile(cid)
        omega = run.network.device_memory_bytes
        clients.append(
            ClientState(
                id=cid,
                shard=shard,
                adapters=tuple(model.device_adapters),
                K=budgets[cid],
                profile=profile,
                memory_budget=None if omega is None else omega * profile.memory_fraction,
            )
        )
    return FederationState(model=model, clients=clients, train=train, test=test)


def evaluate(model: SplitModel, test: Dataset) -> float:
    """Top-1 accuracy on the uncompressed path (all ``M+1`` tokens)."""
    if len(test) == 0:
        return 0.0
    acts = device_forward(model, test.features).activations
    logits = server_forward(model, acts).logits
    return float(np.mean(np.argmax(logits, axis=1) == test.labels))


def _sample_batch(shard: np.ndarray, batch_size: int, rng: Rng) -> np.ndarray:
    take = min(batch_size, shard.size)
    return shard[np.sort(rng.choice(shard.size, take, replace=False))]


class _StepResult(BaseModel):
    model: SplitModel
    loss: float
    server_tokens: int

    class Config:
        arbitrary_types_allowed = True


def local_step(
    model: SplitModel,
    x: np.ndarray,
    y: np.ndarray,
    K: int,
    run: RunConfig,
    meta: MessageMeta,
    quant_rng: Rng,
    traffic: TrafficLog,
) -> _StepResult:
    """One device/server exchange; returns the model with both sides updated."""
    cfg = run.model
    comp = run.compression
    eta = run.train.eta
    out = device_forward(model, x)

    ref: Optional[RefinedActivations] = None
    if comp.pipeline == Pipeline.TSFLORA:
        ref = refine(out.activations, cls_scores(out.cls_patch_logits), K)
        qa = quantize(ref.tokens, comp.q, quant_rng)
        act_meta = ActivationMeta(**meta.model_dump(), M=cfg.M, merged_present=ref.merged_present)
        buf = encode_activations(qa, ref.indices, act_meta)
        rx_qa, rx_indices, rx_meta = decode_activations(buf)
        received = RefinedActivations(
            tokens=dequantize(rx_qa),
            indices=rx_indices,
            merge_weights=ref.merge_weights,
            merged_present=rx_meta.merged_present,
        )
        server_in = received.server_tokens()
    else:
        buf = encode_raw_activations(out.activations, meta, comp.raw_precision)
        server_in, _, _ = decode_raw_activations(buf)
    traffic.uplink_bytes += len(buf)
    traffic.activation_messages += 1

    fwd = server_forward(model, server_in)
    loss, dlogits = cross_entropy(fwd.logits, y)
    server_grads, dhead, dacts = server_backward(model, fwd.cache, dlogits)
    server_adapters = sgd_step(model.server_adapters, server_grads, eta)
    head = sgd_update(model.head, dhead, eta)

    if ref is not None:
        grad_meta = ActivationMeta(**meta.model_dump(), M=cfg.M, merged_present=ref.merged_present)
        gbuf = encode_gradient(pad_server_grad(dacts, ref), grad_meta)
        dtokens, _ = decode_gradient(gbuf)
        dfull = grad_scatter(dtokens, ref, cfg.M)
    else:
        # full sequence: K = M - 1 in the gradient header
        grad_meta = ActivationMeta(**meta.model_dump(), M=cfg.M, merged_present=True)
        gbuf = encode_gradient(dacts, grad_meta)
        dfull, _ = decode_gradient(gbuf)
    traffic.downlink_bytes += len(gbuf)
    traffic.gradient_messages += 1

    device_grads = device_backward(model, out.cache, dfull)
    device_adapters = sgd_step(model.device_adapters, device_grads, eta)
    updated = model.with_device_adapters(device_adapters).with_server_state(server_adapters, head)
    return _StepResult(model=updated, loss=loss, server_tokens=server_in.shape[1])


def run_round(
    state: FederationState, run: RunConfig, round_idx: int
) -> Tuple[FederationState, RoundMetrics]:
    cfg = run.train
    seed = run.seed
    rlog = log.bind(round=round_idx)

    order = Rng(seed, Stream.ROUND, round_idx).choice(
        len(state.clients), cfg.clients_per_round, replace=False
    )
    memory = MemoryModel(model=run.model, B=cfg.B)
    global_model = state.model
    server_model = state.model

    traffic = TrafficLog()
    losses: List[float] = []
    checksums: List[Tuple[str, str]] = []
    participants: List[int] = []
    excluded: List[int] = []
    uploads: List[Tuple[LoraAdapter, ...]] = []
    clients = list(state.clients)
    sim_time = 0.0
    peak_memory = 0

    for cid in (int(c) for c in order):
        client = clients[cid]
        if run.model.e not in feasible_cuts(memory, client.memory_budget, [run.model.e]):
            rlog.warning(
                f"Client {cid} excluded: cut e={run.model.e} needs "
                f"{memory.peak_bytes(run.model.e)} bytes, budget {client.memory_budget:.0f}"
            )
            excluded.append(cid)
            continue
        participants.append(cid)
        up_before, down_before = traffic.uplink_bytes, traffic.downlink_bytes

        model = server_model.with_device_adapters(global_model.device_adapters)
        start = server_digest(model)
        server_tokens = client.K + 2
        for step in range(cfg.I):
            idx = _sample_batch(client.shard, cfg.B, Rng(seed, Stream.BATCH, round_idx, cid, step))
            meta = MessageMeta(round=round_idx, client=cid)
            result = local_step(
                model,
                state.train.features[idx],
                state.train.labels[idx],
                client.K,
                run,
                meta,
                Rng(seed, Stream.QUANT, round_idx, cid, step),
                traffic,
            )
            model = result.model
            losses.append(result.loss)
            server_tokens = result.server_tokens
        checksums.append((start, server_digest(model)))
        server_model = model

        adapters = tuple(model.device_adapters)
        upload = encode_adapters(adapters, MessageMeta(round=round_idx, client=cid))
        decode_adapters(upload)
        traffic.uplink_bytes += len(upload)
        traffic.adapter_messages += 1
        uploads.append(adapters)
        clients[cid] = client.model_copy(update={"adapters": adapters})

        workload = Workload(
            B=min(cfg.B, client.shard.size), M=run.model.M, K=client.K, D=run.model.D,
            r=run.model.r, E=run.model.E, e=run.model.e, steps=cfg.I,
            uplink_bytes=traffic.uplink_bytes - up_before,
            downlink_bytes=traffic.downlink_bytes - down_before,
            server_tokens=server_tokens,
        )
        sim_time += execution_time(workload, run.network, client.profile)
        peak_memory = max(peak_memory, memory.peak_bytes(run.model.e))
        rlog.debug(
            f"Client {cid}: {workload.uplink_bytes} B up, {workload.downlink_bytes} B down"
        )

    if uploads:
        sizes = [clients[cid].shard.size for cid in participants]
        aggregate = fedavg(uploads, data_weights(sizes))
        broadcast = encode_adapters(aggregate, MessageMeta(round=round_idx, client=0))
        for cid in participants:
            traffic.downlink_bytes += len(broadcast)
            traffic.adapter_messages += 1
            clients[cid] = clients[cid].model_copy(update={"adapters": aggregate})
            sim_time += len(broadcast) * 8 / (run.network.bandwidth_mbps * 1e6)
        global_model = server_model.with_device_adapters(aggregate)
    else:
        global_model = server_model

    accuracy = evaluate(global_model, state.test)
    metrics = RoundMetrics(
        round=round_idx,
        train_loss=float(np.mean(losses)) if losses else None,
        test_accuracy=accuracy,
        participants=participants,
        simulated_time_s=sim_time,
        peak_device_memory_bytes=peak_memory,
        server_checksums=checksums,
        excluded_clients=excluded or None,
        **traffic.model_dump(),
    )
    loss_text = "n/a" if metrics.train_loss is None else f"{metrics.train_loss:.4f}"
    rlog.info(
        f"Round {round_idx}: loss {loss_text}, accuracy {accuracy:.4f}, "
        f"up {traffic.uplink_bytes} B, down {traffic.downlink_bytes} B"
    )
    new_state = state.model_copy(
        update={"model": global_model, "clients": clients, "round": round_idx + 1}
    )
    return new_state, metrics


class TrainResult(BaseModel):
    state: FederationState
    metrics: List[RoundMetrics]

    class Config:
        arbitrary_types_allowed = True


SUMMARY_COLUMNS = (
    "round",
    "train_loss",
    "test_accuracy",
    "uplink_bytes",
    "downlink_bytes",
    "simulated_time_s",
    "peak_device_memory_bytes",
)


def write_metrics(metrics: List[RoundMetrics], output_dir: Path) -> Tuple[Path, Path]:
    """``metrics.jsonl`` (one record per round) and ``summary.csv``."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    jsonl = output_dir / "metrics.jsonl"
    with jsonl.open("w", encoding="utf-8", newline="\n") as f:
        for m in metrics:
            f.write(m.to_json_line())
    summary = output_dir / "summary.csv"
    with summary.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for m in metrics:
            writer.writerow([getattr(m, col) for col in SUMMARY_COLUMNS])
    return jsonl, summary


def train(
    run: RunConfig,
    output_dir: Optional[Path] = None,
    state: Optional[FederationState] = None,
) -> TrainResult:
    if state is None:
        state = init_federation(run)
    metrics = []
    for t in range(state.round, state.round + run.train.T):
        state, m = run_round(state, run, t)
        metrics.append(m)
    if output_dir is not None:
        jsonl, _ = write_metrics(metrics, output_dir)
        log.info(f"Wrote {len(metrics)} rounds to {jsonl}")
    final = metrics[-1].test_accuracy if metrics else math.nan
    log.info(f"Training finished after {len(metrics)} rounds, accuracy {final:.4f}")
    return TrainResult(state=state, metrics=metrics)
