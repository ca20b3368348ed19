"""Desk-scale multi-modality-driven LoRA for adverse-condition depth estimation.

Pipeline: frozen toy text/image transformer encoders, low-rank adapters on
the image encoder's attention projections trained by a prompt alignment loss
plus a visual-text contrastive loss, then a frozen-adapter stage that trains
a small depth head on synthetic source-domain scenes and evaluates zero-shot
on simulated night/rain domains.
"""

from .config import ExperimentConfig, load_config
from .tensor import SeededRng, TensorValue, grad_check

__all__ = [
    "ExperimentConfig",
    "SeededRng",
    "TensorValue",
    "grad_check",
    "load_config",
]
__version__ = "0.1.0"
