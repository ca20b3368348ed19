"""Command-line front-end: pretrain, train-depth, evaluate, gradcheck, ablate.

Every subcommand is a pure function of (config file, checkpoint inputs,
seed): reruns reproduce outputs bit for bit. Exit codes: 0 success, 2
configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config, save_config, validate_policy
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    EmptyMaskError,
    NumericsError,
    TokenizationError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_CONFIG_ERRORS = (ConfigError, CheckpointError, TokenizationError, ContractError,
                  DimensionError, FileNotFoundError)
_NUMERICAL_ERRORS = (NumericsError, DomainError, EmptyMaskError)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(path: Path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _write_json(path: Path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config, seed_override=args.seed)
    if getattr(args, "adapter_policy", None):
        validate_policy(args.adapter_policy, cfg.target_domains())
        cfg.stage2.adapter_policy = args.adapter_policy
    return cfg


def cmd_pretrain(args) -> int:
    from . import trainer
    from .encoders import weights_checksum
    from .lora import save_adapters, sets_checksum

    cfg = _load(args)
    out = _out_dir(args)
    image_enc, text_enc = trainer.build_encoders(cfg)
    before = {
        "image_encoder": weights_checksum(image_enc),
        "text_encoder": weights_checksum(text_enc),
    }
    sets, logs = trainer.pretrain_stage(cfg, image_enc, text_enc)
    d = cfg.encoder.embed_dim
    ckpt = out / "adapters.ckpt"
    save_adapters(ckpt, sets, d, d, cfg.lora.rank, cfg.lora.effective_alpha)
    _write_jsonl(out / "pretrain_log.jsonl", logs)
    _write_json(out / "checksums_stage1.json", {
        "encoders_before": before,
        "encoders_after": {
            "image_encoder": weights_checksum(image_enc),
            "text_encoder": weights_checksum(text_enc),
        },
        "adapters": sets_checksum(sets),
    })
    save_config(cfg, out / "config.json")
    print(f"adapters checkpoint: {ckpt}")
    print(f"training log:        {out / 'pretrain_log.jsonl'}")
    print(f"final L_pre: {logs[-1]['pre']:.6f} (initial {logs[0]['pre']:.6f})")
    return EXIT_OK


def cmd_train_depth(args) -> int:
    from . import trainer
    from .encoders import weights_checksum
    from .lora import load_adapters, sets_checksum

    cfg = _load(args)
    out = _out_dir(args)
    image_enc, text_enc = trainer.build_encoders(cfg)
    policy = cfg.stage2.adapter_policy
    d = cfg.encoder.embed_dim
    if policy == "none" and args.adapters is None:
        from .lora import new_adapter_set
        from .tensor import SeededRng

        rng = SeededRng(cfg.seed).derive("adapters")
        sets = [
            new_adapter_set(rng, dom, cfg.encoder.layers, cfg.lora.layers, d,
                            cfg.lora.rank, cfg.lora.effective_alpha)
            for dom in cfg.target_domains()
        ]
    else:
        if args.adapters is None:
            raise ConfigError("train-depth needs --adapters unless --adapter-policy none")
        sets = load_adapters(args.adapters, d, d, cfg.lora.rank, cfg.lora.effective_alpha)
    adapters_before = sets_checksum(sets)
    head, logs = trainer.train_depth_stage(cfg, image_enc, sets, policy=policy)
    ckpt = out / "depth_head.ckpt"
    trainer.save_head(ckpt, head, d)
    _write_jsonl(out / "depth_log.jsonl", logs)
    _write_json(out / "checksums_stage2.json", {
        "image_encoder": weights_checksum(image_enc),
        "adapters_before": adapters_before,
        "adapters_after": sets_checksum(sets),
        "head": trainer.head_checksum(head),
    })
    print(f"depth head checkpoint: {ckpt}")
    print(f"training log:          {out / 'depth_log.jsonl'}")
    print(f"final MAE: {logs[-1]['mae']:.4f} m (initial {logs[0]['mae']:.4f} m)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import trainer
    from .lora import load_adapters
    from .metrics import format_table

    cfg = _load(args)
    out = _out_dir(args)
    image_enc, _ = trainer.build_encoders(cfg)
    d = cfg.encoder.embed_dim
    policy = cfg.stage2.adapter_policy
    if policy == "none" and args.adapters is None:
        sets = []
    else:
        if args.adapters is None:
            raise ConfigError("evaluate needs --adapters unless --adapter-policy none")
        sets = load_adapters(args.adapters, d, d, cfg.lora.rank, cfg.lora.effective_alpha)
    head = trainer.load_head(args.head, d, cfg.encoder.patch)
    results = trainer.evaluate(cfg, image_enc, head, sets, policy=policy)
    doc = trainer.report_document(cfg, results, sets, head)
    report_path = out / "report.json"
    _write_json(report_path, doc)

    from .synthdata import write_manifest
    from .tensor import SeededRng

    base_rng = SeededRng(cfg.eval_seed())
    records = [
        {"seed": base_rng.derive("scene", "eval", i).seed, "domain": domain, "split": "eval"}
        for domain in cfg.eval.domains
        for i in range(cfg.eval.scenes)
    ]
    write_manifest(out / "eval_manifest.jsonl", records)

    print(format_table(doc))
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradchecks import TOLERANCE, run_all

    load_config(args.config, seed_override=args.seed)  # surface config errors early
    rows, ok = run_all()
    width = max(len(r["name"]) for r in rows)
    for r in rows:
        status = "PASS" if r["passed"] else "FAIL"
        print(
            f"{status}  {r['name']:<{width}}  max_rel_err={r['max_err']:.3e}  "
            f"worst={r['param']}[{r['coord']}]"
        )
    print(f"tolerance {TOLERANCE:.0e}: {'all passed' if ok else 'FAILURES'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_ablate(args) -> int:
    from . import trainer

    cfg = _load(args)
    out = _out_dir(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    doc = trainer.run_ablation(cfg, seeds=seeds)
    _write_json(out / "ablation.json", doc)

    print(f"component ablation over seeds {seeds} (mean [min, max] over seeds)")
    header = f"{'variant':<12}" + "".join(f" | {dom:>24}" for dom in cfg.eval.domains)
    print(header)
    print("-" * len(header))
    for variant in trainer.ABLATION_VARIANTS:
        cells = []
        for dom in cfg.eval.domains:
            stats = doc["summary"][variant][dom]["d1"]
            cells.append(
                f"d1 {100*stats['mean']:6.2f} [{100*stats['min']:6.2f},{100*stats['max']:6.2f}]"
            )
        print(f"{variant:<12}" + "".join(f" | {c:>24}" for c in cells))
    print()
    print("rank sweep (trainable adapter parameters)")
    for row in doc["rank_sweep"]:
        print(f"  r={row['rank']:<3d} -> {row['trainable']}")
    print(f"ablation document: {out / 'ablation.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmdlora",
        description="Two-stage LoRA domain adaptation on synthetic depth scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, adapters=False, head=False, policy=False):
        p.add_argument("--config", default=None, help="JSON config file (defaults apply)")
        p.add_argument("--out-dir", default="runs", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if policy:
            p.add_argument("--adapter-policy", default=None,
                           help="merge-mean | single:<domain> | none")
        if adapters:
            p.add_argument("--adapters", default=None, help="adapter checkpoint path")
        if head:
            p.add_argument("--head", required=True, help="depth head checkpoint path")

    p = sub.add_parser("pretrain", help="stage 1: train adapters under the combined loss")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train-depth", help="stage 2: freeze adapters, train the depth head")
    common(p, adapters=True, policy=True)
    p.set_defaults(fn=cmd_train_depth)

    p = sub.add_parser("evaluate", help="zero-shot evaluation over configured domains")
    common(p, adapters=True, head=True, policy=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="component ablation and rank sweep")
    common(p, policy=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
