"""Frozen toy transformer encoders standing in for the pretrained towers.

Both encoders share the same pre-LN attention block; the image encoder
declares LoRA injection points on its q/k/v/proj projections, the text
encoder never takes adapters. All base weights are created frozen and stay
bit-identical through any training run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, TokenizationError
from .lora import lora_linear
from .tensor import (
    SeededRng,
    TensorValue,
    layernorm_rows,
    matmul,
    mean_axis0,
    relu,
    softmax_rows,
    stack_rows,
    transpose,
    unit_rows,
)

DEFAULT_VOCAB = (
    "a an image taken during the day on night rainy snowy foggy in fog snow "
    "rain clear evening morning road scene sunny dark wet storm stormy winter "
    "summer cloudy bright dim twilight"
).split()


@dataclass
class AttentionBlock:
    """Single-head pre-LN transformer block; every field is frozen."""

    w_q: TensorValue
    w_k: TensorValue
    w_v: TensorValue
    w_proj: TensorValue
    ln1_gain: TensorValue
    ln1_bias: TensorValue
    ln2_gain: TensorValue
    ln2_bias: TensorValue
    w_mlp1: TensorValue   # (4d, d)
    w_mlp2: TensorValue   # (d, 4d)

    def forward(self, x: TensorValue, adapters=None) -> TensorValue:
        """x: (tokens, d) -> (tokens, d). adapters maps layer name to LoRAAdapter."""
        adapters = adapters or {}
        d = x.data.shape[1]
        h = layernorm_rows(x, self.ln1_gain, self.ln1_bias)
        q = lora_linear(self.w_q, adapters.get("q"), h)
        k = lora_linear(self.w_k, adapters.get("k"), h)
        v = lora_linear(self.w_v, adapters.get("v"), h)
        scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(d))
        ctx = matmul(softmax_rows(scores), v)
        x = x + lora_linear(self.w_proj, adapters.get("proj"), ctx)
        h2 = layernorm_rows(x, self.ln2_gain, self.ln2_bias)
        m = matmul(relu(matmul(h2, transpose(self.w_mlp1))), transpose(self.w_mlp2))
        return x + m

    def weight_arrays(self):
        yield from (
            self.w_q.data, self.w_k.data, self.w_v.data, self.w_proj.data,
            self.ln1_gain.data, self.ln1_bias.data,
            self.ln2_gain.data, self.ln2_bias.data,
            self.w_mlp1.data, self.w_mlp2.data,
        )


@dataclass
class ToyImageEncoder:
    patch: int
    embed_dim: int
    channels: int
    patch_embed: TensorValue          # (d, p*p*C)
    blocks: list[AttentionBlock]

    def patch_tokens(self, crop: np.ndarray) -> np.ndarray:
        """Cut (H, W, C) into non-overlapping patches, row-major: (T, p*p*C)."""
        p = self.patch
        h, w = crop.shape[0], crop.shape[1]
        if h % p or w % p:
            raise DimensionError(f"crop {h}x{w} not divisible by patch size {p}")
        c = crop.shape[2]
        if c != self.channels:
            raise DimensionError(f"crop has {c} channels, encoder expects {self.channels}")
        grid = crop.reshape(h // p, p, w // p, p, c)
        return grid.transpose(0, 2, 1, 3, 4).reshape(-1, p * p * c)

    def token_states(self, crop: np.ndarray, adapter_set=None) -> TensorValue:
        """Final-block token states for one crop: (T, d)."""
        tokens = TensorValue(self.patch_tokens(crop))
        x = matmul(tokens, transpose(self.patch_embed))
        for idx, block in enumerate(self.blocks):
            per_block = None
            if adapter_set is not None:
                per_block = {
                    layer: ad
                    for (bi, layer), ad in adapter_set.adapters.items()
                    if bi == idx
                }
            x = block.forward(x, per_block)
        return x

    def weight_arrays(self):
        yield self.patch_embed.data
        for block in self.blocks:
            yield from block.weight_arrays()


@dataclass
class ToyTextEncoder:
    vocab: dict[str, int]
    embed_dim: int
    token_embed: TensorValue          # (V, d)
    blocks: list[AttentionBlock]

    def tokenize(self, prompt: str) -> list[int]:
        ids = []
        for word in prompt.lower().split():
            if word not in self.vocab:
                raise TokenizationError(f"word {word!r} is not in the encoder vocabulary")
            ids.append(self.vocab[word])
        if not ids:
            raise TokenizationError("prompt is empty after tokenization")
        return ids

    def weight_arrays(self):
        yield self.token_embed.data
        for block in self.blocks:
            yield from block.weight_arrays()


@dataclass
class PromptSet:
    """Source prompt plus M distinct target-domain prompts, in fixed order."""

    source: str
    targets: list[str] = field(default_factory=list)

    def validate(self, text_encoder: ToyTextEncoder):
        if len(self.targets) < 1:
            raise ConfigError("prompts.targets must contain at least one prompt")
        seen = set()
        for prompt in [self.source, *self.targets]:
            if prompt in seen:
                raise ConfigError(f"prompts must be pairwise distinct, {prompt!r} repeats")
            seen.add(prompt)
            text_encoder.tokenize(prompt)


def _uniform_weight(rng: SeededRng, shape, bound: float) -> TensorValue:
    return TensorValue(rng.uniform(-bound, bound, shape), requires_grad=False)


def _make_blocks(rng: SeededRng, d: int, n_blocks: int) -> list[AttentionBlock]:
    bound = 1.0 / np.sqrt(d)
    ones = lambda: TensorValue(np.ones(d))
    zeros = lambda: TensorValue(np.zeros(d))
    blocks = []
    for i in range(n_blocks):
        brng = rng.derive("block", i)
        blocks.append(AttentionBlock(
            w_q=_uniform_weight(brng, (d, d), bound),
            w_k=_uniform_weight(brng, (d, d), bound),
            w_v=_uniform_weight(brng, (d, d), bound),
            w_proj=_uniform_weight(brng, (d, d), bound),
            ln1_gain=ones(), ln1_bias=zeros(),
            ln2_gain=ones(), ln2_bias=zeros(),
            w_mlp1=_uniform_weight(brng, (4 * d, d), bound),
            w_mlp2=_uniform_weight(brng, (d, 4 * d), bound),
        ))
    return blocks


def init_frozen(seed: int, d: int = 64, n_blocks: int = 2, patch: int = 4,
                vocab=DEFAULT_VOCAB, channels: int = 3):
    """Build the frozen (image, text) encoder pair, reproducible from seed.

    Weight matrices draw from uniform(-1/sqrt(d), 1/sqrt(d)); layernorm
    gains start at one and biases at zero so signal flows at unit scale.
    """
    if d <= 0 or n_blocks <= 0 or patch <= 0:
        raise ConfigError(f"encoder dims must be positive, got d={d} L={n_blocks} p={patch}")
    rng = SeededRng(seed)
    bound = 1.0 / np.sqrt(d)

    img_rng = rng.derive("image")
    image = ToyImageEncoder(
        patch=patch,
        embed_dim=d,
        channels=channels,
        patch_embed=_uniform_weight(img_rng, (d, patch * patch * channels), bound),
        blocks=_make_blocks(img_rng, d, n_blocks),
    )

    txt_rng = rng.derive("text")
    vocab_table = {word: i for i, word in enumerate(vocab)}
    if len(vocab_table) != len(vocab):
        raise ConfigError("encoder vocab contains duplicate words")
    text = ToyTextEncoder(
        vocab=vocab_table,
        embed_dim=d,
        token_embed=_uniform_weight(txt_rng, (len(vocab), d), bound),
        blocks=_make_blocks(txt_rng, d, n_blocks),
    )
    return image, text


def encode_text(text_encoder: ToyTextEncoder, prompt: str) -> TensorValue:
    """Mean-pooled, L2-normalized final-block embedding of a prompt: (d,)."""
    ids = text_encoder.tokenize(prompt)
    x = stack_rows([TensorValue(text_encoder.token_embed.data[i]) for i in ids])
    for block in text_encoder.blocks:
        x = block.forward(x)
    return unit_rows(mean_axis0(x))


def encode_image(image_encoder: ToyImageEncoder, crops: np.ndarray,
                 adapter_set=None) -> TensorValue:
    """Per-crop pooled, L2-normalized embeddings: (N, d).

    With adapter_set None this is the frozen source tower; with a set it is
    the adapter-composed tower for that set's domain. Base weights are
    read-only either way.
    """
    if crops.ndim != 4:
        raise DimensionError(f"crops must be (N, H, W, C), got shape {crops.shape}")
    pooled = []
    for n in range(crops.shape[0]):
        states = image_encoder.token_states(crops[n], adapter_set)
        pooled.append(unit_rows(mean_axis0(states)))
    return stack_rows(pooled)


def weights_checksum(encoder) -> str:
    """SHA-256 over every weight buffer, in declaration order."""
    h = hashlib.sha256()
    for arr in encoder.weight_arrays():
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
