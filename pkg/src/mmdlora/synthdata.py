"""Deterministic synthetic scenes with ground-truth depth, plus the
adverse-domain renderers used only at evaluation time and the multi-crop
sampler.

A scene is a background depth ramp (far at the top, near at the bottom)
with K floating rectangles at random depths, shaded so image intensity
falls off with depth; a small head can therefore genuinely learn depth
from appearance. Domain transforms corrupt the image and never touch the
depth map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import CheckpointError, ConfigError, ContractError
from .tensor import SeededRng

BG_ALBEDO = (0.55, 0.62, 0.68)


@dataclass
class SceneParams:
    height: int = 64
    width: int = 64
    channels: int = 3
    min_depth: float = 1.0
    max_depth: float = 80.0
    rect_count: tuple[int, int] = (3, 8)
    shading_scale: float = 60.0
    texture_amp: float = 0.45
    texture_freq: tuple[float, float] = (0.06, 0.45)
    night_gamma: float = 0.25
    night_noise: float = 0.02
    rain_amplitude: float = 0.15
    rain_contrast: float = 0.7
    rain_streaks: int = 32
    rain_streak_len: int = 16

    def validate(self):
        if self.height <= 0 or self.width <= 0 or self.channels != 3:
            raise ConfigError(
                f"data extents must be positive with 3 channels, got "
                f"{self.height}x{self.width}x{self.channels}"
            )
        if not (0 < self.min_depth < self.max_depth):
            raise ConfigError(
                f"data depth range must satisfy 0 < min < max, got "
                f"[{self.min_depth}, {self.max_depth}]"
            )
        lo, hi = self.rect_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"data.rect_count range is invalid: ({lo}, {hi})")


@dataclass
class SceneSample:
    image: np.ndarray          # (H, W, C) in [0, 1]
    depth: np.ndarray          # (H, W), meters in [min_depth, max_depth]
    domain: str
    seed: int


@dataclass
class CropBatch:
    crops: np.ndarray          # (N, H', W', C)
    depth_crops: np.ndarray    # (N, H', W')
    origins: list[tuple[int, int]] = field(default_factory=list)


def _shading(depth: np.ndarray, scale: float) -> np.ndarray:
    return np.exp(-depth / scale)


def _stripe_texture(depth: np.ndarray, params: SceneParams, phase0: float) -> np.ndarray:
    """Horizontal stripes whose local frequency encodes depth.

    Phase accumulates down each column at a per-pixel rate linear in depth,
    so constant-depth regions get clean stripes and the background ramp a
    smooth chirp. This is the brightness-independent depth cue: stripe
    contrast survives global dimming, stripe level does not.
    """
    f_lo, f_hi = params.texture_freq
    freq = f_lo + (f_hi - f_lo) * (depth - params.min_depth) / (
        params.max_depth - params.min_depth
    )
    phase = 2.0 * np.pi * np.cumsum(freq, axis=0) + phase0
    return 1.0 + params.texture_amp * np.sin(phase)


def gen_scene(rng: SeededRng, params: SceneParams) -> SceneSample:
    """Render one day-clear scene, fully determined by the rng seed."""
    params.validate()
    h, w = params.height, params.width
    rows = np.linspace(params.max_depth, params.min_depth, h)
    depth = np.ascontiguousarray(np.tile(rows[:, None], (1, w)))
    albedo = np.ascontiguousarray(
        np.tile(np.array(BG_ALBEDO), (h, w, 1))
    )

    lo, hi = params.rect_count
    n_rects = int(rng.integers(lo, hi + 1))
    rects = np.empty((n_rects, 8))
    for i in range(n_rects):
        rh = int(rng.integers(max(2, h // 8), max(3, h // 2)))
        rw = int(rng.integers(max(2, w // 8), max(3, w // 2)))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        z = float(rng.uniform(params.min_depth, params.max_depth))
        rgb = rng.uniform(0.2, 1.0, 3)
        rects[i] = (y0, y0 + rh, x0, x0 + rw, z, rgb[0], rgb[1], rgb[2])
    if n_rects:
        # paint far to near so nearer rectangles occlude
        rects = np.ascontiguousarray(rects[np.argsort(-rects[:, 4])])
        K.paint_rects(depth, albedo, rects)

    phase0 = float(rng.uniform(0.0, 2.0 * np.pi))
    shade = _stripe_texture(depth, params, phase0) * _shading(depth, params.shading_scale)
    image = np.clip(albedo * shade[:, :, None], 0.0, 1.0)
    return SceneSample(image=image, depth=depth, domain="day-clear", seed=rng.seed)


def _night(image: np.ndarray, rng: SeededRng, params: SceneParams) -> np.ndarray:
    noisy = image * params.night_gamma + rng.normal(0.0, params.night_noise, image.shape)
    return np.clip(noisy, 0.0, 1.0)


def _rain(image: np.ndarray, rng: SeededRng, params: SceneParams) -> np.ndarray:
    h, w = image.shape[0], image.shape[1]
    span = params.rain_streak_len
    ys = rng.integers(-span, h, params.rain_streaks).astype(np.int64)
    xs = rng.integers(-span, w, params.rain_streaks).astype(np.int64)
    field_2d = K.streak_field(h, w, ys, xs, span, params.rain_amplitude)
    streaked = image + field_2d[:, :, None]
    mean = streaked.mean()
    return np.clip(mean + params.rain_contrast * (streaked - mean), 0.0, 1.0)


# Order matters for compositions: night is applied before rain, reading
# "a rainy night" as a night scene with rain on top.
DOMAIN_CHAINS = {
    "day-clear": (),
    "night": ("night",),
    "rain": ("rain",),
    "rain-night": ("night", "rain"),
}

_PRIMITIVES = {"night": _night, "rain": _rain}


def apply_domain(sample: SceneSample, domain: str, params: SceneParams) -> SceneSample:
    """Re-render a day-clear sample under a domain label; depth is untouched.

    The corruption rng derives from (sample seed, domain), so the same
    sample under the same domain is always corrupted identically.
    """
    if domain not in DOMAIN_CHAINS:
        raise ConfigError(
            f"unknown domain label {domain!r}; known: {sorted(DOMAIN_CHAINS)}"
        )
    if sample.domain != "day-clear":
        raise ContractError(
            f"apply_domain needs a day-clear sample, got {sample.domain!r}"
        )
    image = sample.image.copy()
    for step in DOMAIN_CHAINS[domain]:
        rng = SeededRng(sample.seed).derive("domain", domain, step)
        image = _PRIMITIVES[step](image, rng, params)
    return SceneSample(image=image, depth=sample.depth.copy(), domain=domain, seed=sample.seed)


def sample_crops(rng: SeededRng, sample: SceneSample, n: int,
                 crop_h: int, crop_w: int) -> CropBatch:
    """Cut n uniform-random aligned (image, depth) crops."""
    h, w = sample.depth.shape
    if n < 1:
        raise ContractError(f"crop count must be >= 1, got {n}")
    if crop_h > h or crop_w > w:
        raise ContractError(
            f"crop {crop_h}x{crop_w} larger than image {h}x{w}"
        )
    crops = np.empty((n, crop_h, crop_w, sample.image.shape[2]))
    depths = np.empty((n, crop_h, crop_w))
    origins = []
    for i in range(n):
        oy = int(rng.integers(0, h - crop_h + 1))
        ox = int(rng.integers(0, w - crop_w + 1))
        crops[i] = sample.image[oy:oy + crop_h, ox:ox + crop_w]
        depths[i] = sample.depth[oy:oy + crop_h, ox:ox + crop_w]
        origins.append((oy, ox))
    return CropBatch(crops=crops, depth_crops=depths, origins=origins)


def scene_at(params: SceneParams, seed: int, split: str, index: int) -> SceneSample:
    """Deterministic scene stream: sample `index` of a named split."""
    return gen_scene(SeededRng(seed).derive("scene", split, index), params)


# ---- manifest and raw dumps ----


def write_manifest(path, records):
    """One JSON record per line: {seed, domain, split}."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(
                {"seed": rec["seed"], "domain": rec["domain"], "split": rec["split"]}
            ) + "\n")


def read_manifest(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def save_sample(path, sample: SceneSample):
    """Raw dump: one ASCII header line, then image and depth float64 bytes."""
    h, w, c = sample.image.shape
    header = f"SCENE v1 h={h} w={w} c={c} domain={sample.domain} seed={sample.seed}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(sample.image).tobytes())
        fh.write(np.ascontiguousarray(sample.depth).tobytes())


def load_sample(path) -> SceneSample:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    parts = raw[:nl].decode("utf-8").split()
    if len(parts) != 7 or parts[0] != "SCENE" or parts[1] != "v1":
        raise CheckpointError(f"{path}: bad header {raw[:nl]!r}")
    fields = dict(p.split("=", 1) for p in parts[2:])
    h, w, c = int(fields["h"]), int(fields["w"]), int(fields["c"])
    body = raw[nl + 1:]
    img_bytes = h * w * c * 8
    depth_bytes = h * w * 8
    if len(body) != img_bytes + depth_bytes:
        raise CheckpointError(
            f"{path}: expected {img_bytes + depth_bytes} payload bytes, got {len(body)}"
        )
    image = np.frombuffer(body[:img_bytes]).reshape(h, w, c).copy()
    depth = np.frombuffer(body[img_bytes:]).reshape(h, w).copy()
    return SceneSample(image=image, depth=depth, domain=fields["domain"], seed=int(fields["seed"]))
