"""Config parsing/validation and the CLI surface."""

import json

import numpy as np
import pytest

from mmdlora import cli
from mmdlora.config import ExperimentConfig, from_dict, load_config, save_config
from mmdlora.errors import ConfigError


def test_defaults_validate():
    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.lora.effective_alpha == cfg.lora.rank


def test_roundtrip_is_identity(tmp_path):
    cfg = from_dict({"seed": 3, "lora": {"rank": 4}})
    path = tmp_path / "config.json"
    save_config(cfg, path)
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    save_config(again, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_partial_config_takes_defaults():
    cfg = from_dict({"stage1": {"iterations": 7}})
    assert cfg.stage1.iterations == 7
    assert cfg.stage2.iterations == ExperimentConfig().stage2.iterations


def test_unknown_field_paths():
    with pytest.raises(ConfigError, match="lora.spam"):
        from_dict({"lora": {"spam": 1}})
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"bogus": {}})


def test_lambda_length_mismatch_names_field():
    with pytest.raises(ConfigError, match="loss.lambdas"):
        from_dict({"loss": {"lambdas": [1.0, 0.5]}})


def test_unknown_prompt_word_names_path():
    with pytest.raises(ConfigError, match=r"prompts.targets\[0\]"):
        from_dict({"prompts": {
            "source": {"text": "an image taken during the day", "domain": "day-clear"},
            "targets": [{"text": "an image taken during a blizzard", "domain": "night"}],
        }})


def test_crop_patch_divisibility_checked():
    with pytest.raises(ConfigError, match="divisible"):
        from_dict({"data": {"crop": 10}})


def test_policy_validation():
    with pytest.raises(ConfigError, match="adapter_policy"):
        from_dict({"stage2": {"adapter_policy": "fuse-everything"}})
    with pytest.raises(ConfigError, match="fog"):
        from_dict({"stage2": {"adapter_policy": "single:fog"}})
    cfg = from_dict({"stage2": {"adapter_policy": "single:night"}})
    assert cfg.stage2.adapter_policy == "single:night"


def test_eval_domain_validation():
    with pytest.raises(ConfigError, match=r"eval.domains\[0\]"):
        from_dict({"eval": {"domains": ["blizzard"]}})


def test_encoder_seed_derivation():
    cfg = ExperimentConfig()
    base = cfg.encoder_seed()
    assert cfg.encoder_seed() == base
    cfg2 = from_dict({"seed": 1})
    if cfg.encoder.seed is None:
        assert cfg2.encoder_seed() != base
    cfg3 = from_dict({"encoder": {"seed": 7}})
    assert cfg3.encoder_seed() == 7


def _tiny_config(tmp_path, **overrides):
    raw = {
        "seed": 0,
        "stage1": {"iterations": 4},
        "stage2": {"iterations": 6},
        "eval": {"scenes": 2},
    }
    for key, val in overrides.items():
        raw.setdefault(key, {}).update(val) if isinstance(val, dict) else raw.update({key: val})
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


def test_cli_pretrain_writes_artifacts(tmp_path, capsys):
    cfg_path = _tiny_config(tmp_path)
    out = tmp_path / "run"
    rc = cli.main(["pretrain", "--config", str(cfg_path), "--out-dir", str(out)])
    assert rc == 0
    assert (out / "adapters.ckpt").exists()
    assert (out / "pretrain_log.jsonl").exists()
    lines = (out / "pretrain_log.jsonl").read_text().splitlines()
    assert len(lines) == 4
    first = json.loads(lines[0])
    assert first["align"] == [1.0, 1.0]


def test_cli_pretrain_rerun_identical_checkpoint(tmp_path):
    cfg_path = _tiny_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["pretrain", "--config", str(cfg_path), "--out-dir", str(out_a)]) == 0
    assert cli.main(["pretrain", "--config", str(cfg_path), "--out-dir", str(out_b)]) == 0
    assert (out_a / "adapters.ckpt").read_bytes() == (out_b / "adapters.ckpt").read_bytes()


def test_cli_full_chain_and_report(tmp_path):
    cfg_path = _tiny_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["pretrain", "--config", str(cfg_path), "--out-dir", str(out)]) == 0
    assert cli.main([
        "train-depth", "--config", str(cfg_path), "--out-dir", str(out),
        "--adapters", str(out / "adapters.ckpt"),
    ]) == 0
    assert cli.main([
        "evaluate", "--config", str(cfg_path), "--out-dir", str(out),
        "--adapters", str(out / "adapters.ckpt"),
        "--head", str(out / "depth_head.ckpt"),
    ]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["domains"]) == {"day-clear", "night", "rain"}
    for row in report["domains"].values():
        assert 0.0 <= row["d1_pct"] <= 100.0
    assert {"config_hash", "seeds", "parameter_count", "domains"} <= set(report)

    # stage separation recorded in the checksum files
    cs1 = json.loads((out / "checksums_stage1.json").read_text())
    cs2 = json.loads((out / "checksums_stage2.json").read_text())
    assert cs1["encoders_before"] == cs1["encoders_after"]
    assert cs2["adapters_before"] == cs2["adapters_after"] == cs1["adapters"]


def test_cli_missing_adapter_file_is_config_error(tmp_path):
    cfg_path = _tiny_config(tmp_path)
    rc = cli.main([
        "train-depth", "--config", str(cfg_path), "--out-dir", str(tmp_path / "x"),
        "--adapters", str(tmp_path / "missing.ckpt"),
    ])
    assert rc == 2


def test_cli_train_depth_policy_none_needs_no_adapters(tmp_path):
    cfg_path = _tiny_config(tmp_path)
    out = tmp_path / "baseline"
    rc = cli.main([
        "train-depth", "--config", str(cfg_path), "--out-dir", str(out),
        "--adapter-policy", "none",
    ])
    assert rc == 0
    assert (out / "depth_head.ckpt").exists()


def test_cli_invalid_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"loss": {"lambdas": [1.0]}}))
    rc = cli.main(["pretrain", "--config", str(bad), "--out-dir", str(tmp_path / "x")])
    assert rc == 2


def test_cli_invalid_json_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    rc = cli.main(["pretrain", "--config", str(bad), "--out-dir", str(tmp_path / "x")])
    assert rc == 2


def test_cli_seed_override_changes_outputs(tmp_path):
    cfg_path = _tiny_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["pretrain", "--config", str(cfg_path), "--out-dir", str(out_a)]) == 0
    assert cli.main(["pretrain", "--config", str(cfg_path), "--out-dir", str(out_b),
                     "--seed", "9"]) == 0
    assert (out_a / "adapters.ckpt").read_bytes() != (out_b / "adapters.ckpt").read_bytes()


def test_cli_gradcheck_passes(tmp_path, capsys):
    rc = cli.main(["gradcheck", "--out-dir", str(tmp_path)])
    captured = capsys.readouterr()
    assert rc == 0
    assert "all passed" in captured.out


def test_cli_ablate_micro(tmp_path, capsys):
    cfg_path = _tiny_config(tmp_path)
    out = tmp_path / "ablate"
    rc = cli.main(["ablate", "--config", str(cfg_path), "--out-dir", str(out),
                   "--seeds", "0"])
    assert rc == 0
    doc = json.loads((out / "ablation.json").read_text())
    assert set(doc["per_seed"]) == {"baseline", "pdda", "pdda+vtccl"}
    counts = [row["trainable"] for row in doc["rank_sweep"]]
    ranks = [row["rank"] for row in doc["rank_sweep"]]
    assert ranks == [2, 4, 8, 16]
    for (r1, c1), (r2, c2) in zip(zip(ranks, counts), zip(ranks[1:], counts[1:])):
        assert c2 == 2 * c1  # exactly linear in rank
    table = capsys.readouterr().out
    assert "baseline" in table and "pdda+vtccl" in table and "rank sweep" in table
