"""Experiment configuration: defaults, JSON round-trip, validation.

A config file is a JSON document mirroring the dataclass tree below; any
subset of keys may be given and the rest take defaults. Validation errors
carry the dotted field path. parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .encoders import DEFAULT_VOCAB
from .errors import ConfigError
from .lora import INJECTABLE_LAYERS
from .synthdata import DOMAIN_CHAINS, SceneParams
from .tensor import SeededRng


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    layers: int = 2
    patch: int = 4
    channels: int = 3
    # the frozen towers stand in for one fixed pretrained backbone, so the
    # default is a constant; set null to derive a fresh tower per run seed
    seed: int | None = 1234
    vocab: list[str] = field(default_factory=lambda: list(DEFAULT_VOCAB))


@dataclass
class PromptEntry:
    text: str
    domain: str


@dataclass
class PromptConfig:
    source: PromptEntry = field(
        default_factory=lambda: PromptEntry("an image taken during the day", "day-clear")
    )
    targets: list[PromptEntry] = field(default_factory=lambda: [
        PromptEntry("an image taken on a night", "night"),
        PromptEntry("an image taken on a rainy day", "rain"),
    ])


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float | None = None   # None: alpha = rank (unit scale)
    layers: list[str] = field(default_factory=lambda: list(INJECTABLE_LAYERS))
    shared: bool = False         # one adapter set reused for every domain

    @property
    def effective_alpha(self) -> float:
        return float(self.rank if self.alpha is None else self.alpha)


@dataclass
class LossConfig:
    tau: float = 0.07
    lambdas: list[float] = field(default_factory=lambda: [1.0, 0.1, 1.0])


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    crop: int = 16
    crops_per_image: int = 4
    mix_scene_crops: bool = False
    min_depth: float = 1.0
    max_depth: float = 80.0
    rect_count: list[int] = field(default_factory=lambda: [3, 8])
    shading_scale: float = 60.0
    texture_amp: float = 0.45
    texture_freq: list[float] = field(default_factory=lambda: [0.06, 0.45])
    night_gamma: float = 0.25
    night_noise: float = 0.02
    rain_amplitude: float = 0.15
    rain_contrast: float = 0.7
    rain_streaks: int = 32
    rain_streak_len: int = 16

    def scene_params(self) -> SceneParams:
        return SceneParams(
            height=self.height, width=self.width, channels=3,
            min_depth=self.min_depth, max_depth=self.max_depth,
            rect_count=(self.rect_count[0], self.rect_count[1]),
            shading_scale=self.shading_scale,
            texture_amp=self.texture_amp,
            texture_freq=(self.texture_freq[0], self.texture_freq[1]),
            night_gamma=self.night_gamma, night_noise=self.night_noise,
            rain_amplitude=self.rain_amplitude, rain_contrast=self.rain_contrast,
            rain_streaks=self.rain_streaks, rain_streak_len=self.rain_streak_len,
        )


@dataclass
class Stage1Config:
    iterations: int = 300
    batch: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01


@dataclass
class Stage2Config:
    iterations: int = 2000
    batch: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    adapter_policy: str = "merge-mean"   # merge-mean | single:<domain> | none


@dataclass
class EvalConfig:
    domains: list[str] = field(default_factory=lambda: ["day-clear", "night", "rain"])
    cap: float = 80.0
    scenes: int = 32
    seed: int | None = None      # None: derived from the run seed


@dataclass
class ExperimentConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # ---- derived seeds ----

    def encoder_seed(self) -> int:
        if self.encoder.seed is not None:
            return self.encoder.seed
        return SeededRng(self.seed).derive("encoder").seed

    def eval_seed(self) -> int:
        if self.eval.seed is not None:
            return self.eval.seed
        return SeededRng(self.seed).derive("eval").seed

    def target_domains(self) -> list[str]:
        return [t.domain for t in self.prompts.targets]

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self):
        enc, data = self.encoder, self.data
        if enc.embed_dim <= 0 or enc.layers <= 0 or enc.patch <= 0:
            raise ConfigError("encoder: embed_dim, layers and patch must be positive")
        if not enc.vocab:
            raise ConfigError("encoder.vocab must not be empty")
        if len(set(enc.vocab)) != len(enc.vocab):
            raise ConfigError("encoder.vocab contains duplicate words")

        vocab = set(enc.vocab)
        prompts = [("prompts.source", self.prompts.source)] + [
            (f"prompts.targets[{i}]", t) for i, t in enumerate(self.prompts.targets)
        ]
        if not self.prompts.targets:
            raise ConfigError("prompts.targets must contain at least one prompt")
        seen_texts = set()
        seen_domains = set()
        for path, entry in prompts:
            for word in entry.text.lower().split():
                if word not in vocab:
                    raise ConfigError(f"{path}: word {word!r} is not in encoder.vocab")
            if not entry.text.strip():
                raise ConfigError(f"{path}: prompt text is empty")
            if entry.text in seen_texts:
                raise ConfigError(f"{path}: prompt text {entry.text!r} repeats")
            seen_texts.add(entry.text)
            if entry.domain not in DOMAIN_CHAINS:
                raise ConfigError(
                    f"{path}: unknown domain {entry.domain!r}; known: {sorted(DOMAIN_CHAINS)}"
                )
            if entry.domain in seen_domains:
                raise ConfigError(f"{path}: domain {entry.domain!r} repeats")
            seen_domains.add(entry.domain)
        if self.prompts.source.domain != "day-clear":
            raise ConfigError("prompts.source.domain must be 'day-clear'")

        if not self.lora.layers:
            raise ConfigError("lora.layers must not be empty")
        for layer in self.lora.layers:
            if layer not in INJECTABLE_LAYERS:
                raise ConfigError(
                    f"lora.layers: {layer!r} is not one of {INJECTABLE_LAYERS}"
                )
        if self.lora.rank <= 0 or self.lora.rank > enc.embed_dim:
            raise ConfigError(
                f"lora.rank must be in (0, {enc.embed_dim}], got {self.lora.rank}"
            )
        if self.lora.effective_alpha <= 0:
            raise ConfigError(f"lora.alpha must be positive, got {self.lora.alpha}")

        n_targets = len(self.prompts.targets)
        if len(self.loss.lambdas) != n_targets + 1:
            raise ConfigError(
                f"loss.lambdas: expected {n_targets + 1} entries "
                f"(source + {n_targets} targets), got {len(self.loss.lambdas)}"
            )
        if self.loss.tau <= 0:
            raise ConfigError(f"loss.tau must be positive, got {self.loss.tau}")
        for i, lam in enumerate(self.loss.lambdas):
            if lam < 0:
                raise ConfigError(f"loss.lambdas[{i}] must be nonnegative, got {lam}")

        if data.crop % enc.patch != 0:
            raise ConfigError(
                f"data.crop={data.crop} must be divisible by encoder.patch={enc.patch}"
            )
        if data.height % data.crop != 0 or data.width % data.crop != 0:
            raise ConfigError(
                f"data extents {data.height}x{data.width} must be divisible by "
                f"data.crop={data.crop} for tiled evaluation"
            )
        if data.crops_per_image < 1:
            raise ConfigError("data.crops_per_image must be >= 1")
        if len(data.rect_count) != 2:
            raise ConfigError("data.rect_count must be [low, high]")
        data.scene_params().validate()

        for name, stage in (("stage1", self.stage1), ("stage2", self.stage2)):
            if stage.iterations < 1 or stage.batch < 1:
                raise ConfigError(f"{name}: iterations and batch must be >= 1")
            if stage.lr <= 0:
                raise ConfigError(f"{name}.lr must be positive")
            if stage.weight_decay < 0:
                raise ConfigError(f"{name}.weight_decay must be nonnegative")

        validate_policy(self.stage2.adapter_policy, self.target_domains())

        if not self.eval.domains:
            raise ConfigError("eval.domains must not be empty")
        for i, dom in enumerate(self.eval.domains):
            if dom not in DOMAIN_CHAINS:
                raise ConfigError(
                    f"eval.domains[{i}]: unknown domain {dom!r}; known: {sorted(DOMAIN_CHAINS)}"
                )
        if len(set(self.eval.domains)) != len(self.eval.domains):
            raise ConfigError("eval.domains contains duplicates")
        if self.eval.cap <= 0:
            raise ConfigError("eval.cap must be positive")
        if self.eval.scenes < 1:
            raise ConfigError("eval.scenes must be >= 1")


def validate_policy(policy: str, target_domains):
    if policy in ("none", "merge-mean"):
        return
    if policy.startswith("single:"):
        domain = policy.split(":", 1)[1]
        if domain in target_domains:
            return
        raise ConfigError(
            f"stage2.adapter_policy: {domain!r} is not a configured target domain "
            f"{list(target_domains)}"
        )
    raise ConfigError(
        f"stage2.adapter_policy must be 'merge-mean', 'none' or 'single:<domain>', "
        f"got {policy!r}"
    )


# ---- (de)serialization ----

_SECTIONS = {
    "encoder": EncoderConfig,
    "prompts": PromptConfig,
    "lora": LoraConfig,
    "loss": LossConfig,
    "data": DataConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "eval": EvalConfig,
}


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object, got {type(raw).__name__}")
    allowed = cls.__dataclass_fields__
    kwargs = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown field")
        kwargs[key] = value
    return cls(**kwargs)


def _build_prompts(raw: dict, path: str) -> PromptConfig:
    out = PromptConfig()
    for key, value in raw.items():
        if key == "source":
            out.source = _build(PromptEntry, value, f"{path}.source")
        elif key == "targets":
            out.targets = [
                _build(PromptEntry, t, f"{path}.targets[{i}]")
                for i, t in enumerate(value)
            ]
        else:
            raise ConfigError(f"{path}.{key}: unknown field")
    return out


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key == "seed":
            cfg.seed = int(value)
        elif key == "prompts":
            cfg.prompts = _build_prompts(value, "prompts")
        elif key in _SECTIONS:
            setattr(cfg, key, _build(_SECTIONS[key], value, key))
        else:
            raise ConfigError(f"{key}: unknown top-level field")
    cfg.validate()
    return cfg


def load_config(path=None, seed_override=None) -> ExperimentConfig:
    """Parse a JSON config file (all keys optional) or take full defaults."""
    raw = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    cfg = from_dict(raw)
    if seed_override is not None:
        cfg.seed = int(seed_override)
        cfg.validate()
    return cfg


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
