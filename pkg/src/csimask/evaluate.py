"""Downstream evaluation: frozen-feature extraction, k-shot linear probing,
classification metrics, and the ablation-variant runner.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .core.errors import ConfigError, DimensionError
from .core.init import fan_in_uniform, make_rng
from .core.optim import AdamW
from .core.tensor import Parameter, Tensor, no_grad, take_along, tmean
from .core.functional import affine, log_softmax
from .data import CsiDataset, kshot_sample, preprocess, stratified_split
from .trainer import PretrainState, TrainConfig, extract_latents, pretrain_run

log = logging.getLogger(__name__)


@dataclass
class ProbeConfig:
    k: int = 10
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")


@dataclass
class EvalReport:
    accuracy: float  # percent
    macro_f1: float  # percent
    confusion: np.ndarray  # (C, C), rows = true class
    variant: str = "full"
    config_hash: str = ""

    def summary(self) -> str:
        return (
            f"variant={self.variant} accuracy={self.accuracy:.2f}% "
            f"macro_f1={self.macro_f1:.2f}%"
        )

    def to_csv(self) -> str:
        lines = [f"# variant={self.variant} config_hash={self.config_hash}"]
        lines.append(f"accuracy,{self.accuracy!r}")
        lines.append(f"macro_f1,{self.macro_f1!r}")
        for i, row in enumerate(self.confusion):
            lines.append(f"confusion[{i}]," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def extract_features(state: PretrainState, amplitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Concatenated frozen latents, (B, 512) dual-stream or (B, 256) single."""
    latents = extract_latents(state, amplitude, phase)
    return np.concatenate([latents[m] for m in state.cfg.modalities()], axis=1)


def measure_cross_correlation(
    state: PretrainState, amplitude: np.ndarray, phase: np.ndarray
) -> np.ndarray:
    """Cross-correlation matrix of the projected, batch-normalized latents."""
    from .alignment import cross_correlation, project_and_normalize

    if state.cfg.single_stream:
        raise ConfigError("cross-correlation needs both streams")
    with no_grad():
        za = state.encoders["amplitude"](Tensor(amplitude.astype(np.float32)))
        zp = state.encoders["phase"](Tensor(phase.astype(np.float32)))
        pa, pp = project_and_normalize(za, zp, state.heads["amplitude"], state.heads["phase"])
        return cross_correlation(pa, pp).data.copy()


def evaluate_metrics(
    predictions: np.ndarray, labels: np.ndarray, n_classes: int | None = None
) -> tuple[float, float, np.ndarray]:
    """(accuracy %, macro-F1 %, confusion matrix with rows = true class).

    Classes with no test support are excluded from the macro mean and logged.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise DimensionError("predictions and labels must be equal-length and non-empty")
    if n_classes is None:
        n_classes = int(max(predictions.max(), labels.max())) + 1
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    accuracy = 100.0 * np.trace(confusion) / confusion.sum()
    f1s = []
    skipped = []
    for c in range(n_classes):
        tp = confusion[c, c]
        support = confusion[c].sum()
        predicted = confusion[:, c].sum()
        if support == 0:
            skipped.append(c)
            continue
        precision = tp / predicted if predicted else 0.0
        recall = tp / support
        f1s.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
    if skipped:
        log.info("macro-F1 excludes classes with no support: %s", skipped)
    macro_f1 = 100.0 * float(np.mean(f1s)) if f1s else 0.0
    return float(accuracy), macro_f1, confusion


class LinearClassifier:
    """Single fully connected layer with softmax cross-entropy."""

    def __init__(self, in_dim: int, n_classes: int, rng: np.random.Generator, prefix="classifier"):
        self.weight = Parameter(
            fan_in_uniform((n_classes, in_dim), in_dim, rng, np.float64), f"{prefix}.weight"
        )
        self.bias = Parameter(np.zeros(n_classes, dtype=np.float64), f"{prefix}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def logits(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)

    def predict(self, features: np.ndarray) -> np.ndarray:
        with no_grad():
            scores = self.logits(Tensor(features.astype(np.float64))).data
        return scores.argmax(axis=1)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = log_softmax(logits, axis=-1)
    picked = take_along(logp, np.asarray(labels)[:, None], axis=1)
    return -tmean(picked)


def linear_probe(
    features_train: np.ndarray,
    labels_train: np.ndarray,
    features_test: np.ndarray,
    labels_test: np.ndarray,
    cfg: ProbeConfig,
    n_classes: int | None = None,
    variant: str = "full",
    config_hash: str = "",
) -> EvalReport:
    """Train a linear classifier on frozen features; report test metrics."""
    labels_train = np.asarray(labels_train)
    labels_test = np.asarray(labels_test)
    if n_classes is None:
        n_classes = int(max(labels_train.max(), labels_test.max())) + 1
    present = np.unique(labels_train)
    if present.size < n_classes:
        missing = sorted(set(range(n_classes)) - set(present.tolist()))
        raise ConfigError(f"classes absent from the probe train set: {missing}")
    clf = LinearClassifier(features_train.shape[1], n_classes, make_rng(cfg.seed, 201))
    opt = AdamW(clf.parameters(), lr=cfg.lr)
    xs = features_train.astype(np.float64)
    ys = labels_train
    n = xs.shape[0]
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, 202, epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = cross_entropy(clf.logits(Tensor(xs[idx])), ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    predictions = clf.predict(features_test)
    accuracy, macro_f1, confusion = evaluate_metrics(predictions, labels_test, n_classes)
    return EvalReport(accuracy, macro_f1, confusion, variant=variant, config_hash=config_hash)


def probe_pretrained(
    state: PretrainState,
    dataset: CsiDataset,
    split,
    probe_cfg: ProbeConfig,
    variant: str = "full",
) -> EvalReport:
    """k-shot probe of a pre-trained state on a preprocessed dataset split."""
    labels = dataset.labels
    shots = kshot_sample(labels[split.train], probe_cfg.k, probe_cfg.seed)
    train_idx = split.train[shots]
    feats_train = extract_features(
        state, dataset.amplitude[train_idx], dataset.phase[train_idx]
    )
    feats_test = extract_features(
        state, dataset.amplitude[split.test], dataset.phase[split.test]
    )
    return linear_probe(
        feats_train,
        labels[train_idx],
        feats_test,
        labels[split.test],
        probe_cfg,
        n_classes=dataset.manifest.n_classes,
        variant=variant,
        config_hash=state.cfg.config_hash(),
    )


# ---- ablation variants ---------------------------------------------------------


class AblationVariant(str, Enum):
    FULL = "full"
    SINGLE_STREAM_AMP = "single-stream-amp"
    DUAL_STREAM_MAE = "dual-stream-mae"
    NO_BT = "no-bt"
    NO_AIM = "no-aim"


def variant_config(base: TrainConfig, variant: AblationVariant) -> TrainConfig:
    """Flag set per variant; exactly the five supported rows."""
    if variant == AblationVariant.FULL:
        return base
    if variant == AblationVariant.SINGLE_STREAM_AMP:
        return replace(base, single_stream=True, w_bt=0.0)
    if variant == AblationVariant.DUAL_STREAM_MAE:
        return replace(base, random_mask=True, w_bt=0.0)
    if variant == AblationVariant.NO_BT:
        return replace(base, w_bt=0.0)
    if variant == AblationVariant.NO_AIM:
        return replace(base, random_mask=True)
    raise ConfigError(f"unknown variant {variant!r}")


def ablation_run(
    dataset: CsiDataset,
    base_cfg: TrainConfig,
    variant: AblationVariant | str,
    probe_cfg: ProbeConfig,
    split_ratio: float = 0.8,
    epochs: int | None = None,
) -> EvalReport:
    """Pre-train one ablation variant on the dataset and probe it."""
    variant = AblationVariant(variant)
    cfg = variant_config(base_cfg, variant)
    prepped = preprocess(dataset) if dataset.manifest.normalization == "raw" else dataset
    split = stratified_split(prepped.labels, split_ratio, cfg.seed)
    result = pretrain_run(
        prepped.amplitude[split.train],
        prepped.phase[split.train],
        cfg,
        epochs=epochs,
    )
    return probe_pretrained(result.state, prepped, split, probe_cfg, variant=variant.value)


# ---- supervised path -------------------------------------------------------------


def train_supervised(
    state: PretrainState,
    amplitude: np.ndarray,
    phase: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    steps: int = 200,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
) -> tuple[LinearClassifier, float]:
    """End-to-end supervised training of encoders plus the linear classifier.

    Returns the classifier and the final train accuracy (percent).
    """
    feat_dim = 256 * len(state.cfg.modalities())
    clf = LinearClassifier(feat_dim, n_classes, make_rng(seed, 203))
    for p in clf.parameters():
        p.data = p.data.astype(np.float32)
    params = [p for enc in state.encoders.values() for p in enc.parameters()]
    params += clf.parameters()
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    arrays = {"amplitude": amplitude.astype(np.float32), "phase": phase.astype(np.float32)}
    n = amplitude.shape[0]
    from .core.tensor import concat

    for step in range(steps):
        idx = make_rng(seed, 204, step).choice(n, size=min(batch_size, n), replace=False)
        feats = concat(
            [state.encoders[m](Tensor(arrays[m][idx])) for m in state.cfg.modalities()],
            axis=1,
        )
        loss = cross_entropy(clf.logits(feats), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    feats = extract_features(state, arrays["amplitude"], arrays["phase"])
    predictions = clf.predict(feats)
    accuracy, _, _ = evaluate_metrics(predictions, labels, n_classes)
    return clf, accuracy
