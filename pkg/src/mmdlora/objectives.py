"""Pre-training losses over one batch of crop embeddings.

alignment_loss asks the crop-mean visual shift induced by a domain's
adapters to point the same way as that domain's text-embedding shift, with
an L1 leash keeping adapted features near the source features. vtccl_loss
is a weighted two-sided contrastive term on image/text similarities, and
pretrain_loss is their sum over all target domains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import (
    TensorValue,
    cosine_sim,
    l1_mean,
    logsumexp_rows,
    matmul,
    mean_axis0,
    stack_rows,
    transpose,
)

UNIT_ROW_TOL = 1e-6


@dataclass
class EmbeddingBundle:
    """Embeddings for one batch of N crops and M target domains.

    f_s_v: (N, d) source visual rows; f_t_v[i]: (N, d) adapted visual rows
    for domain i; f_s_l: (d,) source text; f_t_l[i]: (d,) target text.
    """

    f_s_v: TensorValue
    f_t_v: list[TensorValue] = field(default_factory=list)
    f_s_l: TensorValue = None
    f_t_l: list[TensorValue] = field(default_factory=list)

    @property
    def n_crops(self) -> int:
        return self.f_s_v.data.shape[0]

    @property
    def n_domains(self) -> int:
        return len(self.f_t_v)

    @property
    def dim(self) -> int:
        return self.f_s_v.data.shape[1]

    def validate(self):
        """Check shape consistency and unit-norm rows; raises ContractError."""
        n, d = self.f_s_v.data.shape
        if len(self.f_t_v) != len(self.f_t_l):
            raise ContractError(
                f"bundle has {len(self.f_t_v)} visual domains but {len(self.f_t_l)} text domains"
            )
        if self.f_s_l.data.shape != (d,):
            raise ContractError(f"f_s_l shape {self.f_s_l.data.shape} != ({d},)")
        for i, (fv, fl) in enumerate(zip(self.f_t_v, self.f_t_l)):
            if fv.data.shape != (n, d):
                raise ContractError(f"f_t_v[{i}] shape {fv.data.shape} != ({n}, {d})")
            if fl.data.shape != (d,):
                raise ContractError(f"f_t_l[{i}] shape {fl.data.shape} != ({d},)")
        for name, rows in [("f_s_v", self.f_s_v.data)] + [
            (f"f_t_v[{i}]", fv.data) for i, fv in enumerate(self.f_t_v)
        ]:
            norms = np.sqrt((rows * rows).sum(axis=1))
            if np.abs(norms - 1.0).max() > UNIT_ROW_TOL:
                raise ContractError(f"{name} rows are not unit norm within {UNIT_ROW_TOL}")
        for name, vec in [("f_s_l", self.f_s_l.data)] + [
            (f"f_t_l[{i}]", fl.data) for i, fl in enumerate(self.f_t_l)
        ]:
            norm = float(np.sqrt((vec * vec).sum()))
            if abs(norm - 1.0) > UNIT_ROW_TOL:
                raise ContractError(f"{name} is not unit norm within {UNIT_ROW_TOL}")


@dataclass
class VtcclConfig:
    """Temperature and per-term weights: lambdas[0] is the source weight,
    lambdas[1..M] follow the configured target-domain order."""

    tau: float = 0.07
    lambdas: list[float] = field(default_factory=lambda: [1.0, 0.1, 1.0])

    def validate(self, n_domains: int):
        if self.tau <= 0:
            raise ConfigError(f"loss.tau must be positive, got {self.tau}")
        if len(self.lambdas) != n_domains + 1:
            raise ConfigError(
                f"loss.lambdas needs {n_domains + 1} entries (source + targets), "
                f"got {len(self.lambdas)}"
            )
        for i, lam in enumerate(self.lambdas):
            if lam < 0:
                raise ConfigError(f"loss.lambdas[{i}] must be nonnegative, got {lam}")


def alignment_loss(bundle: EmbeddingBundle, domain: int) -> TensorValue:
    """(1 - cos(mean visual shift, text shift)) + L1 leash for one domain.

    At zero-init adapters the visual shift is exactly zero; the cosine
    convention returns 0 there, so the loss starts at 1.
    """
    if not 0 <= domain < bundle.n_domains:
        raise ContractError(
            f"domain index {domain} out of range for {bundle.n_domains} domains"
        )
    dv = mean_axis0(bundle.f_t_v[domain] - bundle.f_s_v)
    dl = bundle.f_t_l[domain] - bundle.f_s_l
    return (1.0 - cosine_sim(dv, dl)) + l1_mean(bundle.f_t_v[domain], bundle.f_s_v)


def _info_nce_rows(visual: TensorValue, texts: list[TensorValue], tau: float) -> TensorValue:
    """Mean over rows of -log softmax with texts[0] as the positive."""
    logits = matmul(visual, transpose(stack_rows(texts))) * (1.0 / tau)
    onehot = np.zeros((len(texts), 1))
    onehot[0, 0] = 1.0
    positive = matmul(logits, TensorValue(onehot))
    return (logsumexp_rows(logits) - positive).mean()


def vtccl_loss(bundle: EmbeddingBundle, cfg: VtcclConfig) -> TensorValue:
    """Weighted two-sided contrastive loss, averaged over the N crops.

    Source term: source visual rows against the source text (positive) and
    every target text (negatives). Per-domain term: that domain's visual
    rows against its own text (positive) and the source text (negative).
    Log-sum-exp is max-stabilized, so extreme 1/tau is safe.
    """
    cfg.validate(bundle.n_domains)
    total = cfg.lambdas[0] * _info_nce_rows(
        bundle.f_s_v, [bundle.f_s_l, *bundle.f_t_l], cfg.tau
    )
    for i in range(bundle.n_domains):
        term = _info_nce_rows(
            bundle.f_t_v[i], [bundle.f_t_l[i], bundle.f_s_l], cfg.tau
        )
        total = total + cfg.lambdas[i + 1] * term
    return total


def pretrain_loss(bundle: EmbeddingBundle, cfg: VtcclConfig) -> TensorValue:
    """Sum of alignment_loss over all domains plus vtccl_loss."""
    total = alignment_loss(bundle, 0)
    for i in range(1, bundle.n_domains):
        total = total + alignment_loss(bundle, i)
    return total + vtccl_loss(bundle, cfg)


def loss_components(bundle: EmbeddingBundle, cfg: VtcclConfig):
    """(per-domain alignment list, vtccl, total) sharing one graph."""
    aligns = [alignment_loss(bundle, i) for i in range(bundle.n_domains)]
    vt = vtccl_loss(bundle, cfg)
    total = aligns[0]
    for a in aligns[1:]:
        total = total + a
    total = total + vt
    return aligns, vt, total
