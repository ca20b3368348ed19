"""Two-stage pipeline: adapters first, depth head second.

Stage 1 optimizes only the adapter matrices under the combined alignment +
contrastive loss; encoders stay frozen. Stage 2 folds the trained adapters
into the image encoder per the configured policy, freezes everything, and
trains a small per-token depth head on source-domain crops. Evaluation
tiles held-out scenes, predicts depth per tile, and scores each configured
domain with the metrics module.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels as K
from .config import ExperimentConfig
from .encoders import (
    ToyImageEncoder,
    ToyTextEncoder,
    encode_image,
    encode_text,
    init_frozen,
)
from .errors import ConfigError, ContractError, NumericsError
from .lora import (
    AdapterSet,
    adapter_params,
    count_trainable,
    new_adapter_set,
    sets_checksum,
)
from .metrics import depth_metrics, mean_report
from .objectives import EmbeddingBundle, VtcclConfig, loss_components
from .synthdata import apply_domain, sample_crops, scene_at
from .tensor import (
    SeededRng,
    TensorValue,
    add_rowvec,
    l1_mean,
    matmul,
    softplus,
    transpose,
)


class AdamW:
    """Decoupled-weight-decay Adam over named TensorValue parameters."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.moments = [
            (np.zeros(p.data.size), np.zeros(p.data.size)) for _, p in self.params
        ]

    def step(self):
        self.step_count += 1
        for (name, p), (m, v) in zip(self.params, self.moments):
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            K.adamw_update(
                p.data.reshape(-1), np.ascontiguousarray(p.grad.reshape(-1)),
                m, v, self.step_count,
                self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            )

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


@dataclass
class DepthHead:
    """Per-token linear map to patch depth logits, squashed into range.

    depth = d_min + (d_max - d_min) * s/(1+s) with s = softplus(logit), so
    outputs are strictly inside (d_min, d_max) and differentiable everywhere.
    """

    w: TensorValue          # (p*p, d)
    b: TensorValue          # (p*p,)
    patch: int
    d_min: float
    d_max: float

    def forward_tokens(self, states: TensorValue) -> TensorValue:
        z = add_rowvec(matmul(states, transpose(self.w)), self.b)
        s = softplus(z)
        return self.d_min + (self.d_max - self.d_min) * (s / (s + 1.0))

    def params(self):
        return [("head.w", self.w), ("head.b", self.b)]

    def freeze(self):
        self.w.requires_grad = False
        self.b.requires_grad = False


def new_depth_head(rng: SeededRng, d: int, patch: int, d_min: float, d_max: float) -> DepthHead:
    bound = 1.0 / np.sqrt(d)
    return DepthHead(
        w=TensorValue(rng.uniform(-bound, bound, (patch * patch, d)), requires_grad=True),
        b=TensorValue(np.zeros(patch * patch), requires_grad=True),
        patch=patch,
        d_min=float(d_min),
        d_max=float(d_max),
    )


def depth_to_tokens(depth_crop: np.ndarray, patch: int) -> np.ndarray:
    """(H, W) depth crop -> (T, p*p) rows matching the encoder's token order."""
    h, w = depth_crop.shape
    grid = depth_crop.reshape(h // patch, patch, w // patch, patch)
    return grid.transpose(0, 2, 1, 3).reshape(-1, patch * patch)


def tokens_to_depth(token_vals: np.ndarray, h: int, w: int, patch: int) -> np.ndarray:
    """Inverse of depth_to_tokens."""
    grid = token_vals.reshape(h // patch, w // patch, patch, patch)
    return grid.transpose(0, 2, 1, 3).reshape(h, w)


def head_checksum(head: DepthHead) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(head.w.data).tobytes())
    h.update(np.ascontiguousarray(head.b.data).tobytes())
    return h.hexdigest()


# ---- adapter policy for stage 2 ----


def merged_image_encoder(encoder: ToyImageEncoder, sets: list[AdapterSet],
                         policy: str) -> ToyImageEncoder:
    """A new encoder with the policy's adapter deltas folded into its weights.

    merge-mean averages the per-domain deltas (stage 2 sees only source
    images, so the symmetric combination is used); single:<domain> folds one
    set; none returns the base encoder untouched.
    """
    if policy == "none":
        return encoder
    if policy == "merge-mean":
        chosen = sets
    elif policy.startswith("single:"):
        domain = policy.split(":", 1)[1]
        chosen = [s for s in sets if s.domain == domain]
        if not chosen:
            raise ConfigError(
                f"stage2.adapter_policy: no adapter set for domain {domain!r}"
            )
    else:
        raise ConfigError(f"unknown adapter policy {policy!r}")
    if not chosen:
        raise ConfigError("adapter policy needs at least one adapter set")

    attr = {"q": "w_q", "k": "w_k", "v": "w_v", "proj": "w_proj"}
    blocks = []
    for bi, block in enumerate(encoder.blocks):
        updates = {}
        for layer, name in attr.items():
            deltas = [
                s.adapters[(bi, layer)].delta()
                for s in chosen if (bi, layer) in s.adapters
            ]
            if deltas:
                merged = getattr(block, name).data + sum(deltas) / len(deltas)
                updates[name] = TensorValue(merged)
        blocks.append(replace(block, **updates) if updates else block)
    return replace(encoder, blocks=blocks)


# ---- stage 1 ----


def _batch_scenes(cfg: ExperimentConfig, split: str, iteration: int):
    params = cfg.data.scene_params()
    return [
        scene_at(params, cfg.seed, split, iteration * cfg.stage1.batch + b)
        for b in range(cfg.stage1.batch)
    ]


def _batch_crop_sets(cfg: ExperimentConfig, scenes, iteration: int, split: str):
    """One (N, H', W', C) crop array per batch slot.

    Default: slot b holds N crops of scene b. With data.mix_scene_crops the
    j-th crop of slot b comes from scene (b + j) mod batch, so a slot mixes
    images while staying deterministic.
    """
    n = cfg.data.crops_per_image
    ch = cw = cfg.data.crop
    per_scene = []
    for b, scene in enumerate(scenes):
        rng = SeededRng(cfg.seed).derive("crops", split, iteration, b)
        per_scene.append(sample_crops(rng, scene, n, ch, cw))
    if not cfg.data.mix_scene_crops:
        return per_scene
    mixed = []
    n_scenes = len(scenes)
    for b in range(n_scenes):
        crops = np.stack([per_scene[(b + j) % n_scenes].crops[j] for j in range(n)])
        depths = np.stack([per_scene[(b + j) % n_scenes].depth_crops[j] for j in range(n)])
        origins = [per_scene[(b + j) % n_scenes].origins[j] for j in range(n)]
        mixed.append(type(per_scene[0])(crops=crops, depth_crops=depths, origins=origins))
    return mixed


def text_embeddings(cfg: ExperimentConfig, text_enc: ToyTextEncoder):
    """Frozen source and per-target text embeddings as constants."""
    src = TensorValue(encode_text(text_enc, cfg.prompts.source.text).data)
    targets = [
        TensorValue(encode_text(text_enc, t.text).data) for t in cfg.prompts.targets
    ]
    return src, targets


def pretrain_stage(cfg: ExperimentConfig, image_enc: ToyImageEncoder,
                   text_enc: ToyTextEncoder, lambdas=None):
    """Train adapters under the combined loss; returns (sets, log records).

    Only adapter parameters move. lambdas can override the configured
    contrastive weights (the ablation runner passes zeros for the
    alignment-only variant).
    """
    domains = cfg.target_domains()
    vt_cfg = VtcclConfig(
        tau=cfg.loss.tau,
        lambdas=list(cfg.loss.lambdas) if lambdas is None else list(lambdas),
    )
    vt_cfg.validate(len(domains))

    d = cfg.encoder.embed_dim
    adapter_rng = SeededRng(cfg.seed).derive("adapters")
    if cfg.lora.shared:
        shared = new_adapter_set(adapter_rng, "shared", cfg.encoder.layers,
                                 cfg.lora.layers, d, cfg.lora.rank,
                                 cfg.lora.effective_alpha)
        sets = [shared]
        set_for_domain = {dom: shared for dom in domains}
    else:
        sets = [
            new_adapter_set(adapter_rng, dom, cfg.encoder.layers, cfg.lora.layers,
                            d, cfg.lora.rank, cfg.lora.effective_alpha)
            for dom in domains
        ]
        set_for_domain = dict(zip(domains, sets))

    opt = AdamW(adapter_params(sets), lr=cfg.stage1.lr,
                weight_decay=cfg.stage1.weight_decay)
    src_text, tgt_texts = text_embeddings(cfg, text_enc)

    logs = []
    for it in range(cfg.stage1.iterations):
        scenes = _batch_scenes(cfg, "stage1", it)
        crop_sets = _batch_crop_sets(cfg, scenes, it, "stage1")
        batch_total = None
        align_acc = np.zeros(len(domains))
        vt_acc = 0.0
        for cb in crop_sets:
            f_s_v = encode_image(image_enc, cb.crops, None)
            f_t_v = [
                encode_image(image_enc, cb.crops, set_for_domain[dom])
                for dom in domains
            ]
            bundle = EmbeddingBundle(
                f_s_v=f_s_v, f_t_v=f_t_v, f_s_l=src_text, f_t_l=tgt_texts,
            )
            bundle.validate()
            aligns, vt, total = loss_components(bundle, vt_cfg)
            align_acc += np.array([a.item() for a in aligns])
            vt_acc += vt.item()
            batch_total = total if batch_total is None else batch_total + total
        loss = batch_total * (1.0 / len(crop_sets))
        record = {
            "iter": it,
            "align": [float(a) for a in align_acc / len(crop_sets)],
            "vtccl": vt_acc / len(crop_sets),
            "pre": loss.item(),
        }
        if not math.isfinite(record["pre"]):
            raise NumericsError(
                f"non-finite pre-training loss at iteration {it}: "
                f"align={record['align']} vtccl={record['vtccl']}"
            )
        logs.append(record)
        loss.backward()
        opt.step()
        opt.zero_grad()
    return sets, logs


# ---- stage 2 ----


def train_depth_stage(cfg: ExperimentConfig, image_enc: ToyImageEncoder,
                      sets: list[AdapterSet], policy: str | None = None):
    """Train the depth head on source-domain crops; returns (head, log records).

    Adapters and encoder are frozen; the policy's deltas are folded into a
    fresh encoder copy, so the originals stay bit-identical.
    """
    policy = cfg.stage2.adapter_policy if policy is None else policy
    for s in sets:
        s.freeze()
    enc = merged_image_encoder(image_enc, sets, policy)
    head = new_depth_head(
        SeededRng(cfg.seed).derive("head"),
        cfg.encoder.embed_dim, cfg.encoder.patch,
        cfg.data.min_depth, cfg.data.max_depth,
    )
    opt = AdamW(head.params(), lr=cfg.stage2.lr, weight_decay=cfg.stage2.weight_decay)
    params = cfg.data.scene_params()
    n = cfg.data.crops_per_image
    logs = []
    for it in range(cfg.stage2.iterations):
        batch_total = None
        count = 0
        for b in range(cfg.stage2.batch):
            scene = scene_at(params, cfg.seed, "stage2", it * cfg.stage2.batch + b)
            rng = SeededRng(cfg.seed).derive("crops", "stage2", it, b)
            cb = sample_crops(rng, scene, n, cfg.data.crop, cfg.data.crop)
            for j in range(n):
                states = enc.token_states(cb.crops[j])
                pred = head.forward_tokens(states)
                gt = TensorValue(depth_to_tokens(cb.depth_crops[j], cfg.encoder.patch))
                term = l1_mean(pred, gt)
                batch_total = term if batch_total is None else batch_total + term
                count += 1
        loss = batch_total * (1.0 / count)
        mae = loss.item()
        if not math.isfinite(mae):
            raise NumericsError(f"non-finite depth loss at iteration {it}: mae={mae}")
        logs.append({"iter": it, "mae": mae})
        loss.backward()
        opt.step()
        opt.zero_grad()
    return head, logs


# ---- evaluation ----


def predict_depth(enc: ToyImageEncoder, head: DepthHead, image: np.ndarray,
                  crop: int) -> np.ndarray:
    """Tile the image into crop-sized blocks, predict each, stitch."""
    h, w = image.shape[0], image.shape[1]
    out = np.empty((h, w))
    for ty in range(0, h, crop):
        for tx in range(0, w, crop):
            states = enc.token_states(image[ty:ty + crop, tx:tx + crop])
            tok = head.forward_tokens(states)
            out[ty:ty + crop, tx:tx + crop] = tokens_to_depth(
                tok.data, crop, crop, head.patch
            )
    return out


def evaluate(cfg: ExperimentConfig, image_enc: ToyImageEncoder, head: DepthHead,
             sets: list[AdapterSet], policy: str | None = None):
    """Per-domain mean metrics on held-out scenes; returns ordered (domain, report) list.

    The same held-out day-clear scenes underlie every domain column; each
    domain sees its own corrupted rendering of them.
    """
    policy = cfg.stage2.adapter_policy if policy is None else policy
    enc = merged_image_encoder(image_enc, sets, policy)
    params = cfg.data.scene_params()
    bases = [
        scene_at(params, cfg.eval_seed(), "eval", i) for i in range(cfg.eval.scenes)
    ]
    results = []
    for domain in cfg.eval.domains:
        per_scene = []
        for base in bases:
            sample = apply_domain(base, domain, params)
            pred = predict_depth(enc, head, sample.image, cfg.data.crop)
            per_scene.append(depth_metrics(pred, sample.depth, cfg.eval.cap))
        results.append((domain, mean_report(per_scene)))
    return results


# ---- head checkpoint ----

HEAD_MAGIC = "MMDHEAD"


def save_head(path, head: DepthHead, d: int):
    lines = [
        f"{HEAD_MAGIC} v1 d={d} p={head.patch} dmin={head.d_min:.17g} dmax={head.d_max:.17g}"
    ]
    for tag, arr in (("W", head.w.data), ("B", head.b.data.reshape(1, -1))):
        lines.append(f"{tag} {arr.shape[0]} {arr.shape[1]}")
        lines.extend(f"{v:.17g}" for v in arr.reshape(-1))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_head(path, d: int, patch: int) -> DepthHead:
    from .errors import CheckpointError

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CheckpointError(f"{path}: empty head checkpoint")
    parts = lines[0].split()
    if len(parts) != 6 or parts[0] != HEAD_MAGIC or parts[1] != "v1":
        raise CheckpointError(f"{path}: bad head header {lines[0]!r}")
    fields = dict(p.split("=", 1) for p in parts[2:])
    if int(fields["d"]) != d:
        raise CheckpointError(f"{path}: head d={fields['d']} does not match config d={d}")
    if int(fields["p"]) != patch:
        raise CheckpointError(f"{path}: head p={fields['p']} does not match config patch={patch}")
    pos = 1
    mats = {}
    for tag in ("W", "B"):
        if pos >= len(lines):
            raise CheckpointError(f"{path}: truncated head checkpoint")
        rec = lines[pos].split()
        if len(rec) != 3 or rec[0] != tag:
            raise CheckpointError(f"{path}: expected {tag} record at line {pos + 1}")
        rows, cols = int(rec[1]), int(rec[2])
        pos += 1
        vals = lines[pos:pos + rows * cols]
        if len(vals) != rows * cols:
            raise CheckpointError(f"{path}: truncated head checkpoint in {tag} record")
        mats[tag] = np.array([float(v) for v in vals]).reshape(rows, cols)
        pos += rows * cols
    pp = patch * patch
    if mats["W"].shape != (pp, d) or mats["B"].shape != (1, pp):
        raise CheckpointError(f"{path}: head matrix shapes do not match config")
    return DepthHead(
        w=TensorValue(mats["W"], requires_grad=False),
        b=TensorValue(mats["B"].reshape(-1), requires_grad=False),
        patch=patch,
        d_min=float(fields["dmin"]),
        d_max=float(fields["dmax"]),
    )


# ---- whole-pipeline and ablation drivers ----


def build_encoders(cfg: ExperimentConfig):
    return init_frozen(
        cfg.encoder_seed(), d=cfg.encoder.embed_dim, n_blocks=cfg.encoder.layers,
        patch=cfg.encoder.patch, vocab=cfg.encoder.vocab, channels=cfg.encoder.channels,
    )


def report_document(cfg: ExperimentConfig, results, sets, head) -> dict:
    from .metrics import aggregate

    doc = aggregate(results)
    doc["config_hash"] = cfg.config_hash()
    doc["seeds"] = {
        "run": cfg.seed,
        "encoder": cfg.encoder_seed(),
        "eval": cfg.eval_seed(),
    }
    doc["parameter_count"] = {
        "adapters": count_trainable(sets),
        "depth_head": sum(p.data.size for _, p in head.params()) if head else 0,
    }
    return doc


def run_pipeline(cfg: ExperimentConfig, lambdas=None, policy: str | None = None):
    """pretrain -> train-depth -> evaluate, in memory; returns a result dict.

    With policy 'none' the stage-1 run is skipped entirely (the no-adapter
    baseline); adapters are still created so parameter counts and checksums
    stay reportable, they just never train.
    """
    image_enc, text_enc = build_encoders(cfg)
    enc_before = weights_checksum_pair(image_enc, text_enc)
    policy = cfg.stage2.adapter_policy if policy is None else policy
    if policy == "none":
        adapter_rng = SeededRng(cfg.seed).derive("adapters")
        sets = [
            new_adapter_set(adapter_rng, dom, cfg.encoder.layers, cfg.lora.layers,
                            cfg.encoder.embed_dim, cfg.lora.rank, cfg.lora.effective_alpha)
            for dom in cfg.target_domains()
        ]
        stage1_logs = []
    else:
        sets, stage1_logs = pretrain_stage(cfg, image_enc, text_enc, lambdas=lambdas)
    adapters_after_stage1 = sets_checksum(sets)
    head, stage2_logs = train_depth_stage(cfg, image_enc, sets, policy=policy)
    adapters_after_stage2 = sets_checksum(sets)
    results = evaluate(cfg, image_enc, head, sets, policy=policy)
    enc_after = weights_checksum_pair(image_enc, text_enc)
    return {
        "config": cfg,
        "sets": sets,
        "head": head,
        "stage1_logs": stage1_logs,
        "stage2_logs": stage2_logs,
        "results": results,
        "report": report_document(cfg, results, sets, head),
        "checksums": {
            "encoders_before": enc_before,
            "encoders_after": enc_after,
            "adapters_after_stage1": adapters_after_stage1,
            "adapters_after_stage2": adapters_after_stage2,
            "head_after_stage2": head_checksum(head),
        },
    }


def weights_checksum_pair(image_enc, text_enc):
    from .encoders import weights_checksum

    return {"image": weights_checksum(image_enc), "text": weights_checksum(text_enc)}


ABLATION_VARIANTS = ("baseline", "pdda", "pdda+vtccl")


def run_ablation(cfg: ExperimentConfig, seeds=(0, 1, 2)):
    """Component ablation over seeds plus the rank/parameter-count sweep.

    baseline: no adapters at all (policy none, stage 1 skipped).
    pdda: alignment-only pre-training (contrastive weights zeroed).
    pdda+vtccl: the full configured loss.
    """
    from dataclasses import replace as cfg_replace

    rows = {}
    for variant in ABLATION_VARIANTS:
        per_seed = {}
        for seed in seeds:
            run_cfg = cfg_replace(cfg, seed=int(seed))
            if variant == "baseline":
                out = run_pipeline(run_cfg, policy="none")
            elif variant == "pdda":
                out = run_pipeline(run_cfg, lambdas=[0.0] * (len(cfg.target_domains()) + 1))
            else:
                out = run_pipeline(run_cfg)
            per_seed[seed] = {dom: rep.as_dict() for dom, rep in out["results"]}
        rows[variant] = per_seed

    summary = {}
    for variant, per_seed in rows.items():
        summary[variant] = {}
        for dom in cfg.eval.domains:
            vals = {
                key: [per_seed[s][dom][key] for s in seeds]
                for key in ("absrel", "sqrel", "rmse", "d1")
            }
            summary[variant][dom] = {
                key: {
                    "mean": float(np.mean(v)),
                    "min": float(np.min(v)),
                    "max": float(np.max(v)),
                }
                for key, v in vals.items()
            }

    ranks = [2, 4, 8, 16]
    d = cfg.encoder.embed_dim
    sweep = []
    for r in ranks:
        rng = SeededRng(0).derive("sweep", r)
        sets = [
            new_adapter_set(rng, dom, cfg.encoder.layers, cfg.lora.layers, d, r,
                            float(r))
            for dom in cfg.target_domains()
        ]
        sweep.append({"rank": r, "trainable": count_trainable(sets)})

    return {
        "seeds": list(seeds),
        "per_seed": rows,
        "summary": summary,
        "rank_sweep": sweep,
    }
