"""Command-line entry point.

Every subcommand reads one TOML run config (``--config``, default the
project's ``config/config.toml`` or ``config/config.example.toml``), applies
``--set section.key=value`` overrides, prints a JSON document on stdout and
logs to stderr. Failures end in a single ``error: <ErrorClass>: <detail>``
line on stderr with exit code 2 for usage and config errors, 1 otherwise.
"""

import argparse
import json
import sys
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from app.analysis import (
    BoundConstants,
    SearchSpace,
    delta,
    grid_search_P,
    measure_constants,
    r_term,
)
from app.compression import cls_scores, dequantize, quantize, refine
from app.config import PROJECT_ROOT, Config, RunConfig, read_toml
from app.exceptions import ConfigError, TSFLoraError
from app.federation import (
    Workload,
    execution_time,
    load_datasets,
    partition_clients,
    time_breakdown,
    train,
)
from app.logger import define_log_level, logger
from app.model import device_forward, init_model, load_checkpoint, save_checkpoint
from app.model.params import SplitModel
from app.numeric.rng import Rng, Stream
from app.schema import ALLOWED_BITS, DeviceProfile, Pipeline
from app.wire import (
    ActivationMeta,
    activation_message_bytes,
    adapter_message_bytes,
    compression_ratio,
    decode_activations,
    encode_activations,
    gradient_message_bytes,
    inspect_message,
    payload_bits,
    raw_message_bytes,
)
from app.wire.goldens import golden_activation_messages, write_goldens


WIRE_GOLDEN_DIR = PROJECT_ROOT / "tests" / "wire" / "goldens"
SEEDED_GOLDEN_PATH = PROJECT_ROOT / "tests" / "federation" / "goldens" / "seeded.json"

# full share of the reference device, used by the bandwidth sweep
REFERENCE_DEVICE = DeviceProfile(compute_fraction=1.0, memory_fraction=1.0)


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """argparse with the one-line error format of the rest of the CLI."""

    def error(self, message: str):
        sys.stderr.write(f"error: UsageError: {message}\n")
        sys.exit(2)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = CliParser(prog="tsflora", description="Token-compressed split federated LoRA")
    parser.add_argument("--config", "-c", help="Run config TOML (default: config/config.toml)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one config key, e.g. --set train.eta=0.05 (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Run the federated simulation")
    p.add_argument("--output", "-o", help="Metrics directory (default: [output].dir)")
    p.add_argument("--checkpoint", help="Save the final model to this file")

    p = sub.add_parser("partition", help="Print the client shards of the training set")
    p.add_argument("--output", "-o", help="Also write the shard indices as JSON")

    p = sub.add_parser("analyze", help="Quantization error, residual and latency estimates")
    p.add_argument("--checkpoint", help="Measure constants on this model instead of a fresh init")
    p.add_argument("--q", type=int, help="Bit-width (default: compression.q)")
    p.add_argument("--K", type=int, help="Token budget (default: compression.K)")
    p.add_argument("--d", type=int, help="Quantized entry count (default: B (K+2) D)")
    p.add_argument(
        "--bandwidth", type=float, nargs="+", default=[], metavar="MBPS",
        help="Report per-round execution time at each link rate",
    )

    p = sub.add_parser("search", help="Grid search over (e, K, q)")
    p.add_argument("--checkpoint", help="Measure constants on this model instead of a fresh init")

    p = sub.add_parser("codec", help="Encode, decode or inspect wire messages")
    codec = p.add_subparsers(dest="action", required=True)
    enc = codec.add_parser("encode", help="Compress one batch of cut-layer activations")
    enc.add_argument("output", help="Destination .tsfa file")
    enc.add_argument("--checkpoint", help="Model to run (default: fresh init from the seed)")
    enc.add_argument("--batch", type=int, default=4, help="Test samples in the batch")
    enc.add_argument("--q", type=int, help="Bit-width (default: compression.q)")
    enc.add_argument("--K", type=int, help="Token budget (default: compression.K)")
    dec = codec.add_parser("decode", help="Decode an activation message")
    dec.add_argument("input")
    dec.add_argument("--output", "-o", help="Save the dequantized tokens as .npy")
    ins = codec.add_parser("inspect", help="Print the header of any message")
    ins.add_argument("input")

    p = sub.add_parser("goldens", help="Compare or regenerate golden vectors")
    p.add_argument("--write", action="store_true", help="Overwrite the stored goldens")
    p.add_argument("--dir", default=str(WIRE_GOLDEN_DIR), help="Wire golden directory")
    p.add_argument("--seeded", default=str(SEEDED_GOLDEN_PATH), help="Seeded golden JSON")

    return parser.parse_args(argv)


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"value = {text}")["value"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Merge ``section.key=value`` pairs into a parsed config dict."""
    merged = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not KEY=VALUE")
        *sections, leaf = key.strip().split(".")
        target = merged
        for section in sections:
            target = target.setdefault(section, {})
            if not isinstance(target, dict):
                raise ConfigError(f"invalid value for {key}: {section} is not a table", key=key)
        target[leaf] = _parse_value(text.strip())
    return merged


def load_run(args: argparse.Namespace) -> RunConfig:
    if not args.config and not args.overrides:
        return Config().run
    path = Path(args.config) if args.config else Config._get_config_path()
    return RunConfig.from_dict(apply_overrides(read_toml(path), args.overrides))


def _model_for(run: RunConfig, checkpoint: Optional[str]) -> SplitModel:
    if checkpoint is None:
        return init_model(run.model, Rng(run.seed).child(Stream.INIT))
    model = load_checkpoint(checkpoint)
    if model.config != run.model:
        raise ConfigError(
            f"invalid value for model: checkpoint {checkpoint} was built with a different [model]",
            key="model",
        )
    return model


def _bound_constants(run: RunConfig, model: SplitModel, K: int) -> BoundConstants:
    psi = lam = 0.0
    if run.bounds.Psi is None or run.bounds.Lambda is None:
        train_set, _ = load_datasets(run, Rng(run.seed).child(Stream.DATA))
        b = run.train.B
        batches = [train_set.features[i : i + b] for i in range(0, min(len(train_set), 4 * b), b)]
        psi, lam = measure_constants(model, batches, K)
        logger.info(f"Measured Psi={psi:.6g}, Lambda={lam:.6g} on {len(batches)} batches")
    return BoundConstants.from_settings(run.bounds, run.train, psi, lam)


def round_workload(run: RunConfig, K: int, q: int) -> Workload:
    """Traffic and compute of one client's round for the configured pipeline."""
    cfg, t = run.model, run.train
    adapters = adapter_message_bytes(cfg.e, cfg.D, cfg.r)
    if run.compression.pipeline == Pipeline.TSFLORA:
        up = activation_message_bytes(t.B, K, cfg.D, q)
        down = gradient_message_bytes(t.B, K, cfg.D)
        tokens = K + 2
    else:
        up = raw_message_bytes(t.B, cfg.M + 1, cfg.D, run.compression.raw_precision)
        down = gradient_message_bytes(t.B, cfg.M - 1, cfg.D)
        tokens = cfg.M + 1
    return Workload(
        B=t.B, M=cfg.M, K=K, D=cfg.D, r=cfg.r, E=cfg.E, e=cfg.e, steps=t.I,
        uplink_bytes=t.I * up + adapters,
        downlink_bytes=t.I * down + adapters,
        server_tokens=tokens,
    )


def cmd_train(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    output = Path(args.output) if args.output else Path(run.output.dir)
    result = train(run, output_dir=output)
    if args.checkpoint:
        save_checkpoint(result.state.model, args.checkpoint)
    last = result.metrics[-1]
    return {
        "rounds": len(result.metrics),
        "final_test_accuracy": last.test_accuracy,
        "uplink_bytes": sum(m.uplink_bytes for m in result.metrics),
        "downlink_bytes": sum(m.downlink_bytes for m in result.metrics),
        "metrics": str(output / "metrics.jsonl"),
        "summary": str(output / "summary.csv"),
    }


def cmd_partition(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    train_set, _ = load_datasets(run, Rng(run.seed).child(Stream.DATA))
    shards = partition_clients(run, train_set)
    clients = [
        {
            "id": cid,
            "size": int(shard.size),
            "class_counts": np.bincount(train_set.labels[shard], minlength=run.model.C).tolist(),
        }
        for cid, shard in enumerate(shards)
    ]
    if args.output:
        path = Path(args.output)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps([s.tolist() for s in shards]) + "\n", encoding="utf-8")
        logger.info(f"Wrote {len(shards)} shards to {path}")
    return {"samples": len(train_set), "iid": run.train.iid, "clients": clients}


def cmd_analyze(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    cfg = run.model
    q = args.q if args.q is not None else run.compression.q
    K = args.K if args.K is not None else run.compression.K
    if not 1 <= K <= cfg.M:
        raise UsageError(f"--K must lie in [1, {cfg.M}], got {K}")
    if q < 1:
        raise UsageError(f"--q must be positive, got {q}")
    B = run.train.B
    d = args.d if args.d is not None else B * (K + 2) * cfg.D
    if d < 1:
        raise UsageError(f"--d must be positive, got {d}")

    model = _model_for(run, args.checkpoint)
    consts = _bound_constants(run, model, K)
    report: Dict[str, Any] = {
        "q": q,
        "K": K,
        "d": d,
        "delta": delta(q, d),
        "Psi": consts.Psi,
        "Lambda": consts.Lambda,
        "r_term": r_term(q, K, consts, cfg.M, B, d),
        "payload_bits": payload_bits(B, K, cfg.D, q),
        "activation_message_bytes": activation_message_bytes(B, K, cfg.D, q),
        "compression_ratio": compression_ratio(K, q, cfg.M),
    }
    workload = round_workload(run, K, q)
    sweep = []
    for mbps in args.bandwidth:
        network = run.network.model_copy(update={"bandwidth_mbps": mbps})
        parts = time_breakdown(workload, network, REFERENCE_DEVICE)
        sweep.append(
            {"bandwidth_mbps": mbps, "total_s": execution_time(workload, network, REFERENCE_DEVICE), **parts}
        )
    if sweep:
        report["bandwidth_sweep"] = sweep
    return report


def cmd_search(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    try:
        space = SearchSpace.from_run(run)
    except ValidationError as e:
        raise ConfigError(f"invalid value for search: {e.errors()[0].get('msg')}", key="search") from e
    model = _model_for(run, args.checkpoint)
    consts = _bound_constants(run, model, run.compression.K)
    result = grid_search_P(space, consts, run.model.M, run.train.B, run.model.D, model=run.model)
    return {"feasible": not hasattr(result, "binding"), **result.model_dump()}


def cmd_codec(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    if args.action == "inspect":
        return inspect_message(Path(args.input).read_bytes())

    if args.action == "decode":
        qa, indices, meta = decode_activations(Path(args.input).read_bytes())
        tokens = dequantize(qa)
        if args.output:
            np.save(args.output, tokens)
            logger.info(f"Wrote {tokens.shape} tokens to {args.output}")
        return {
            **meta.model_dump(),
            "shape": list(tokens.shape),
            "indices": indices.tolist(),
            "max_abs": float(np.max(np.abs(tokens))) if tokens.size else 0.0,
        }

    q = args.q if args.q is not None else run.compression.q
    if q not in ALLOWED_BITS:
        raise UsageError(f"--q must be one of {ALLOWED_BITS}, got {q}")
    K = args.K if args.K is not None else run.compression.K
    model = _model_for(run, args.checkpoint)
    _, test_set = load_datasets(run, Rng(run.seed).child(Stream.DATA))
    out = device_forward(model, test_set.features[: args.batch])
    ref = refine(out.activations, cls_scores(out.cls_patch_logits), K)
    qa = quantize(ref.tokens, q, Rng(run.seed).child(Stream.CODEC))
    meta = ActivationMeta(M=run.model.M, merged_present=ref.merged_present)
    buf = encode_activations(qa, ref.indices, meta)
    path = Path(args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf)
    logger.info(f"Wrote {len(buf)}-byte activation message to {path}")
    return inspect_message(buf)


def _seeded_goldens(run: RunConfig) -> Dict[str, Any]:
    train_set, _ = load_datasets(run, Rng(run.seed).child(Stream.DATA))
    shards = partition_clients(run, train_set)
    result = train(run)
    return {
        "seed": run.seed,
        "shard_sizes": [int(s.size) for s in shards],
        "final_test_accuracy": result.metrics[-1].test_accuracy,
    }


def cmd_goldens(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    directory = Path(args.dir)
    if args.write:
        written = write_goldens(directory)
        seeded = Path(args.seeded)
        seeded.parent.mkdir(parents=True, exist_ok=True)
        seeded.write_text(json.dumps(_seeded_goldens(run), indent=2) + "\n", encoding="utf-8")
        logger.info(f"Wrote seeded goldens to {seeded}")
        return {"written": sorted(str(p) for p in [*written.values(), seeded])}

    status = {}
    for name, buf in golden_activation_messages().items():
        path = directory / f"{name}.tsfa"
        status[name] = path.exists() and path.read_bytes() == buf
    return {"match": status}


COMMANDS = {
    "train": cmd_train,
    "partition": cmd_partition,
    "analyze": cmd_analyze,
    "search": cmd_search,
    "codec": cmd_codec,
    "goldens": cmd_goldens,
}


def _fail(exc: BaseException, code: int) -> int:
    detail = str(exc).splitlines()[0] if str(exc) else ""
    sys.stderr.write(f"error: {type(exc).__name__}: {detail}\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    try:
        run = load_run(args)
        define_log_level(print_level=run.output.log_level, name=args.command)
        logger.info(f"Starting {args.command}")
        report = COMMANDS[args.command](run, args)
    except (UsageError, ConfigError) as e:
        return _fail(e, 2)
    except (TSFLoraError, OSError) as e:
        return _fail(e, 1)
    except KeyboardInterrupt:
        logger.warning("Operation interrupted.")
        return 130
    sys.stdout.write(json.dumps(report, indent=2, default=str) + "\n")
    logger.info(f"Finished {args.command}")
    return 0
