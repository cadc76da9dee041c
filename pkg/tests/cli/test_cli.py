import json

import numpy as np
import pytest
from loguru import logger

from app.cli import apply_overrides, main
from app.config import Config


SMALL_TOML = """
seed = 3

[model]
E = 2
D = 8
M = 4
r = 2
C = 3
e = 1
patch_dim = 4
init_std = 0.35

[compression]
K = 2
q = 8

[train]
T = 3
I = 2
eta = 0.05
B = 4
clients = 4
clients_per_round = 2
iid = true

[data]
n_train = 64
n_test = 24
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_TOML, encoding="utf-8")
    return path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    # main attaches a sink to the captured stderr, which closes with the test
    logger.remove()
    captured = capsys.readouterr()
    report = json.loads(captured.out) if code == 0 else None
    return code, report, captured.err


def test_apply_overrides_parses_toml_values():
    merged = apply_overrides({"train": {"T": 5}}, ["train.T=2", "train.iid=true", "output.dir=runs/a"])
    assert merged == {"train": {"T": 2, "iid": True}, "output": {"dir": "runs/a"}}


def test_analyze_reports_quantizer_error(capsys, toy_config_path):
    code, report, _ = run_cli(capsys, "--config", toy_config_path, "analyze", "--q", 8, "--d", 1)
    assert code == 0
    assert report["delta"] == pytest.approx(1.0 / 255.0)
    assert report["Psi"] > 0.0 and report["Lambda"] > 0.0
    assert report["r_term"] > 0.0
    assert "bandwidth_sweep" not in report


def test_analyze_bandwidth_sweep_gets_faster(capsys, toy_config_path):
    code, report, _ = run_cli(capsys, "-c", toy_config_path, "analyze", "--bandwidth", 1, 10, 100)
    assert code == 0
    totals = [row["total_s"] for row in report["bandwidth_sweep"]]
    assert totals[0] > totals[1] > totals[2]


def test_train_twice_writes_identical_metrics(capsys, small_config, tmp_path):
    outputs = [tmp_path / "a", tmp_path / "b"]
    for out in outputs:
        code, report, _ = run_cli(
            capsys, "-c", small_config, "--set", "train.T=2", "train", "--output", out
        )
        assert code == 0
        assert report["rounds"] == 2
    lines = (outputs[0] / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    for name in ("metrics.jsonl", "summary.csv"):
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()


def test_train_checkpoint_feeds_analyze(capsys, small_config, tmp_path):
    ckpt = tmp_path / "model.tsfl"
    code, _, _ = run_cli(
        capsys, "-c", small_config, "train", "--output", tmp_path / "run", "--checkpoint", ckpt
    )
    assert code == 0 and ckpt.exists()
    code, report, _ = run_cli(capsys, "-c", small_config, "analyze", "--checkpoint", ckpt)
    assert code == 0
    assert report["K"] == 2 and report["q"] == 8


def test_checkpoint_from_other_model_is_a_config_error(capsys, small_config, tmp_path):
    ckpt = tmp_path / "model.tsfl"
    run_cli(capsys, "-c", small_config, "train", "--output", tmp_path / "run", "--checkpoint", ckpt)
    code, _, err = run_cli(capsys, "-c", small_config, "--set", "model.r=3", "search", "--checkpoint", ckpt)
    assert code == 2
    assert "error: ConfigError:" in err


def test_unknown_key_names_the_key(capsys, small_config):
    code, _, err = run_cli(capsys, "-c", small_config, "--set", "train.etaa=0.1", "partition")
    assert code == 2
    assert "train.etaa" in err
    assert "error: ConfigError:" in err


def test_invalid_value_names_the_key(capsys, small_config):
    code, _, err = run_cli(capsys, "-c", small_config, "--set", "compression.q=3", "partition")
    assert code == 2
    assert "error: ConfigError: invalid value for compression" in err
    assert "q=3" in err


def test_missing_config_file(capsys, tmp_path):
    code, _, err = run_cli(capsys, "-c", tmp_path / "absent.toml", "partition")
    assert code == 2
    assert "missing file" in err


def test_malformed_override_is_a_usage_error(capsys, small_config):
    code, _, err = run_cli(capsys, "-c", small_config, "--set", "train.T", "partition")
    assert code == 2
    assert "error: UsageError:" in err


def test_unknown_command_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "error: UsageError:" in capsys.readouterr().err


def test_partition_covers_training_set(capsys, small_config, tmp_path):
    shards_path = tmp_path / "shards.json"
    code, report, _ = run_cli(capsys, "-c", small_config, "partition", "--output", shards_path)
    assert code == 0
    assert report["samples"] == 64
    assert [c["id"] for c in report["clients"]] == [0, 1, 2, 3]
    assert sum(c["size"] for c in report["clients"]) == 64
    assert all(sum(c["class_counts"]) == c["size"] for c in report["clients"])
    shards = json.loads(shards_path.read_text(encoding="utf-8"))
    assert sorted(i for shard in shards for i in shard) == list(range(64))


def test_search_without_caps_keeps_every_token(capsys, small_config):
    code, report, _ = run_cli(capsys, "-c", small_config, "search")
    assert code == 0
    assert report["feasible"] is True
    assert report["K"] == 4
    assert report["q"] == 32
    assert report["e"] == 1


def test_search_reports_infeasible_payload(capsys, small_config):
    code, report, _ = run_cli(capsys, "-c", small_config, "--set", "search.c_max_bits=1", "search")
    assert code == 0
    assert report["feasible"] is False
    assert report["binding"] == ["payload"]


def test_codec_encode_inspect_decode(capsys, small_config, tmp_path):
    msg = tmp_path / "acts.tsfa"
    code, encoded, _ = run_cli(capsys, "-c", small_config, "codec", "encode", msg, "--batch", 3, "--q", 4)
    assert code == 0
    assert (encoded["B"], encoded["K"], encoded["D"], encoded["q"]) == (3, 2, 8, 4)
    assert encoded["bytes"] == msg.stat().st_size

    code, inspected, _ = run_cli(capsys, "-c", small_config, "codec", "inspect", msg)
    assert code == 0
    assert inspected == encoded

    npy = tmp_path / "tokens.npy"
    code, decoded, _ = run_cli(capsys, "-c", small_config, "codec", "decode", msg, "--output", npy)
    assert code == 0
    assert decoded["shape"] == [3, 4, 8]
    assert np.load(npy).shape == (3, 4, 8)
    assert decoded["max_abs"] <= max(abs(encoded["a_min"]), abs(encoded["a_max"])) + 1e-12


def test_codec_rejects_unsupported_bits(capsys, small_config, tmp_path):
    code, _, err = run_cli(capsys, "-c", small_config, "codec", "encode", tmp_path / "x.tsfa", "--q", 3)
    assert code == 2
    assert "error: UsageError:" in err


def test_codec_inspect_garbage_fails(capsys, small_config, tmp_path):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"NOPE" + bytes(40))
    code, _, err = run_cli(capsys, "-c", small_config, "codec", "inspect", junk)
    assert code == 1
    assert "error: BadMagicError:" in err


def test_goldens_match_stored_vectors(capsys, small_config):
    code, report, _ = run_cli(capsys, "-c", small_config, "goldens")
    assert code == 0
    assert report["match"] and all(report["match"].values())


def test_goldens_write_then_compare(capsys, small_config, tmp_path):
    wire_dir = tmp_path / "wire"
    seeded = tmp_path / "seeded.json"
    code, report, _ = run_cli(
        capsys, "-c", small_config, "goldens", "--write", "--dir", wire_dir, "--seeded", seeded
    )
    assert code == 0
    assert str(seeded) in report["written"]
    data = json.loads(seeded.read_text(encoding="utf-8"))
    assert data["seed"] == 3 and sum(data["shard_sizes"]) == 64
    code, report, _ = run_cli(capsys, "-c", small_config, "goldens", "--dir", wire_dir)
    assert all(report["match"].values())


@pytest.fixture
def broken_default_config(tmp_path, monkeypatch):
    """Point the project default at an invalid file and drop any loaded singleton."""
    bad = tmp_path / "config.toml"
    bad.write_text("[train]\netaa = 0.1\n", encoding="utf-8")
    monkeypatch.setattr(Config, "_get_config_path", staticmethod(lambda: bad))
    monkeypatch.setattr(Config, "_instance", None)
    return bad


def test_broken_default_config_is_reported_not_raised(capsys, broken_default_config):
    code, _, err = run_cli(capsys, "partition")
    assert code == 2
    assert "error: ConfigError: unknown key: train.etaa" in err


def test_explicit_config_ignores_broken_default(capsys, broken_default_config, toy_config_path):
    code, report, _ = run_cli(capsys, "--config", toy_config_path, "analyze", "--q", 8, "--d", 1)
    assert code == 0
    assert report["delta"] == pytest.approx(1.0 / 255.0)


def test_missing_default_config(capsys, tmp_path, monkeypatch):
    monkeypatch.setattr(Config, "_get_config_path", staticmethod(lambda: tmp_path / "absent.toml"))
    monkeypatch.setattr(Config, "_instance", None)
    code, _, err = run_cli(capsys, "--set", "train.T=1", "partition")
    assert code == 2
    assert "missing file" in err
