"""Dual-stream masked reconstruction pretraining for WiFi channel state
information, with adaptive information-guided masking, cross-modal
redundancy reduction, and a k-shot linear-probing evaluation harness.

The package is organized as:

- ``csimask.core``: tensor engine with reverse-mode differentiation
  (convolutions, affine maps, normalizations, attention, AdamW).
- ``csimask.data``: preprocessing, synthetic datasets, the packed file format.
- ``csimask.masking``: patch grid, visibility policy, Gumbel-TopK partitions.
- ``csimask.backbone``: convolutional encoder/decoder and masked losses.
- ``csimask.alignment``: projection heads and the cross-correlation loss.
- ``csimask.trainer``: decoupled pre-training loop, metrics, checkpoints.
- ``csimask.evaluate``: feature extraction, linear probing, ablations.
- ``csimask.visualize``: CSV/PGM emitters for heatmaps, masks, correlations.
- ``csimask.cli``: the ``csimask`` command.
"""

from . import alignment, backbone, checks, core, data, evaluate, masking, trainer, visualize
from .core import Parameter, Tensor
from .data import CsiDataset, DatasetManifest, SynthConfig, read_dataset, synth_generate, write_dataset
from .evaluate import AblationVariant, EvalReport, ProbeConfig
from .masking import MaskPartition, PatchGrid
from .trainer import MetricsLog, PretrainState, TrainConfig, pretrain_run

__version__ = "0.1.0"

__all__ = [
    "AblationVariant",
    "CsiDataset",
    "DatasetManifest",
    "EvalReport",
    "MaskPartition",
    "MetricsLog",
    "Parameter",
    "PatchGrid",
    "PretrainState",
    "ProbeConfig",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "alignment",
    "backbone",
    "checks",
    "core",
    "data",
    "evaluate",
    "masking",
    "pretrain_run",
    "read_dataset",
    "synth_generate",
    "trainer",
    "visualize",
    "write_dataset",
]
