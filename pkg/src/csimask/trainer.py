"""Pre-training loop: adaptive masking, dual-stream reconstruction,
cross-modal alignment, and decoupled parameter updates.

Each step runs four phases in order: (1) per-modality visibility scoring
and Gumbel-TopK partitioning, (2) masked reconstruction of both streams,
(3) alignment of the unmasked latents, (4) two separate optimizer steps:
the policy group is driven only by the masking loss, the backbone group
only by reconstruction plus weighted alignment. The two gradient flows are
disjoint by construction (detached patch tokens, stop-gradient rewards,
constant masks), which the tests assert bitwise.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .alignment import ProjectionHead, bt_loss, cross_correlation, project_and_normalize
from .backbone import Decoder, Encoder, masked_recon_loss
from .core.errors import ConfigError, ConfigHashMismatchError, DimensionError, NonFiniteError
from .core.init import make_rng
from .core.optim import AdamW
from .core.tensor import Parameter, Tensor, no_grad
from .masking import (
    MaskingPolicy,
    PatchGrid,
    aim_loss_batch,
    apply_mask,
    patch_tokens,
    per_patch_error,
    policy_probs,
    sample_partitions,
)
from .storage import read_record, write_record

CHECKPOINT_MAGIC = b"CSCK"
CHECKPOINT_VERSION = 1

MODALITIES = ("amplitude", "phase")


@dataclass
class TrainConfig:
    """All pre-training hyperparameters; defaults follow the reference setup."""

    rho: float = 0.95
    patch: tuple[int, int] = (3, 5)
    w_rec: float = 1.0
    w_bt: float = 0.2
    w_aim: float = 1e-4
    epochs: int = 300
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    d_policy: int = 256
    d_latent: int = 256
    bt_width: int = 1024
    bt_lambda: float = 0.005
    policy_heads: int = 1
    seed: int = 0
    # ablation variant flags
    single_stream: bool = False
    random_mask: bool = False
    # loss variant flags
    loss_kind: str = "mae"  # "mae" | "mse"
    normalized_target: bool = False
    rec_reduction: str = "sum"  # "sum" | "mean" over modalities

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise ConfigError("rho must lie in (0, 1)")
        if min(self.w_rec, self.w_bt, self.w_aim) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.loss_kind not in ("mae", "mse"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if self.rec_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown reduction {self.rec_reduction!r}")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def modalities(self) -> tuple[str, ...]:
        return ("amplitude",) if self.single_stream else MODALITIES


def save_config(cfg: TrainConfig, path):
    """Flat key=value text form of the config."""
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path) -> TrainConfig:
    fields_by_name = {f: t for f, t in TrainConfig.__annotations__.items()}
    kwargs = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields_by_name:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        kwargs[key] = _parse_value(key, value)
    return TrainConfig(**kwargs)


def _parse_value(key: str, value: str):
    if key in ("patch", "betas"):
        parts = [p for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
        conv = int if key == "patch" else float
        return tuple(conv(p) for p in parts)
    if key in ("single_stream", "random_mask", "normalized_target"):
        return value.lower() in ("1", "true", "yes")
    if key in ("loss_kind", "rec_reduction"):
        return value
    if key in ("epochs", "batch_size", "d_policy", "d_latent", "bt_width", "policy_heads", "seed"):
        return int(value)
    return float(value)


@dataclass
class MetricsLog:
    """Append-only per-step loss records."""

    columns = (
        "step",
        "epoch",
        "l_rec_amplitude",
        "l_rec_phase",
        "l_bt",
        "l_aim_amplitude",
        "l_aim_phase",
        "total",
        "wall_time",
    )
    rows: list[tuple] = field(default_factory=list)

    def append(self, **kv):
        self.rows.append(tuple(kv[c] for c in self.columns))

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def epoch_mean(self, name: str, epoch: int) -> float:
        i = self.columns.index(name)
        e = self.columns.index("epoch")
        vals = [r[i] for r in self.rows if r[e] == epoch]
        return float(np.mean(vals))

    def to_csv(self, include_wall_time: bool = True) -> str:
        cols = self.columns if include_wall_time else self.columns[:-1]
        lines = [",".join(cols)]
        for row in self.rows:
            cells = row if include_wall_time else row[:-1]
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in cells))
        return "\n".join(lines) + "\n"

    def deterministic_csv(self) -> str:
        """CSV without the wall-time column; bitwise-stable across runs."""
        return self.to_csv(include_wall_time=False)

    def write(self, path):
        Path(path).write_text(self.to_csv())


class PretrainState:
    """Bundles models, optimizers and RNG for one pre-training run."""

    def __init__(self, cfg: TrainConfig, n_antennas: int, n_sub: int, n_time: int):
        self.cfg = cfg
        self.grid = PatchGrid(cfg.patch[0], cfg.patch[1], n_sub, n_time)
        self.shape = (n_antennas, n_sub, n_time)
        dtype = np.float32
        self.encoders: dict[str, Encoder] = {}
        self.decoders: dict[str, Decoder] = {}
        self.heads: dict[str, ProjectionHead] = {}
        self.policies: dict[str, MaskingPolicy] = {}
        for mi, mod in enumerate(cfg.modalities()):
            rng = make_rng(cfg.seed, 1, mi)
            self.encoders[mod] = Encoder(
                n_antennas, n_sub, n_time, rng, dtype, f"{mod}.encoder", patch=cfg.patch
            )
            self.decoders[mod] = Decoder(
                n_antennas, n_sub, n_time, rng, dtype, f"{mod}.decoder", patch=cfg.patch
            )
            if not cfg.random_mask:
                self.policies[mod] = MaskingPolicy(
                    embed_dim=128,
                    d_policy=cfg.d_policy,
                    heads=cfg.policy_heads,
                    rng=make_rng(cfg.seed, 2, mi),
                    dtype=dtype,
                    prefix=f"{mod}.policy",
                )
        # Heads exist for any dual-stream config (so correlations can be
        # measured even for w_bt=0 runs) but only train when BT is active.
        if not cfg.single_stream:
            for mi, mod in enumerate(cfg.modalities()):
                self.heads[mod] = ProjectionHead(
                    cfg.d_latent, cfg.bt_width, make_rng(cfg.seed, 3, mi), dtype, f"{mod}.bt_head"
                )
        self.use_bt = (not cfg.single_stream) and cfg.w_bt > 0
        trained_heads = list(self.heads.values()) if self.use_bt else []
        self.backbone_params = self._collect(
            list(self.encoders.values()) + list(self.decoders.values()) + trained_heads
        )
        self.policy_params = self._collect(list(self.policies.values()))
        self.opt_backbone = AdamW(
            self.backbone_params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
        )
        self.opt_policy = (
            AdamW(self.policy_params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
            if self.policy_params
            else None
        )
        self.mask_rng = make_rng(cfg.seed, 4)
        self.step = 0
        self.last_partitions: dict[str, list] = {}
        self.last_probs: dict[str, np.ndarray] = {}

    @staticmethod
    def _collect(modules) -> list[Parameter]:
        params: list[Parameter] = []
        for m in modules:
            params.extend(m.parameters())
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.backbone_params + self.policy_params}

    # ---- one optimization step -------------------------------------------

    def step_once(self, batch_amp: np.ndarray, batch_phase: np.ndarray) -> dict:
        cfg = self.cfg
        if batch_amp.shape[0] < 2:
            raise DimensionError("pre-training batches must have at least 2 samples")
        batches = {"amplitude": batch_amp, "phase": batch_phase}
        losses: dict[str, float] = {}
        rec_terms = []
        aim_terms = []
        self.last_partitions.clear()
        self.last_probs.clear()

        for mod in cfg.modalities():
            x = batches[mod]
            probs_t = None
            if cfg.random_mask:
                uniform = np.full((x.shape[0], self.grid.n_patches), 1.0 / self.grid.n_patches)
                partitions = sample_partitions(uniform, cfg.rho, self.grid, self.mask_rng)
            else:
                policy = self.policies[mod]
                conv_w, conv_b, kernel = self.encoders[mod].convs[0]
                tokens = patch_tokens(x, conv_w, conv_b, kernel, self.grid, policy)
                probs_t = policy_probs(tokens, policy)
                partitions = sample_partitions(
                    probs_t.data, cfg.rho, self.grid, self.mask_rng
                )
                self.last_probs[mod] = probs_t.data.copy()
            self.last_partitions[mod] = partitions

            pixel_masks = np.stack([p.pixel_mask for p in partitions])
            x_masked = np.ascontiguousarray(x * pixel_masks[:, None, :, :].astype(x.dtype))
            xhat = self.decoders[mod](self.encoders[mod](Tensor(x_masked)))
            rec = masked_recon_loss(
                xhat, x, pixel_masks, kind=cfg.loss_kind, normalized_target=cfg.normalized_target
            )
            rec_terms.append(rec)
            losses[f"l_rec_{mod}"] = rec.item()

            if probs_t is not None:
                abs_err = np.abs(xhat.data - x)  # reward signal, constant to both groups
                rewards = [
                    per_patch_error(abs_err[b], self.grid, partitions[b])
                    for b in range(x.shape[0])
                ]
                la = aim_loss_batch(probs_t, partitions, rewards)
                aim_terms.append(la)
                losses[f"l_aim_{mod}"] = la.item()
            else:
                losses[f"l_aim_{mod}"] = 0.0
        if cfg.single_stream:
            losses.setdefault("l_rec_phase", 0.0)
            losses.setdefault("l_aim_phase", 0.0)

        if self.use_bt:
            z = {
                mod: self.encoders[mod](Tensor(batches[mod])) for mod in cfg.modalities()
            }
            pa, pp = project_and_normalize(
                z["amplitude"], z["phase"], self.heads["amplitude"], self.heads["phase"]
            )
            corr = cross_correlation(pa, pp)
            bt = bt_loss(corr, cfg.bt_lambda)
            losses["l_bt"] = bt.item()
        else:
            bt = None
            losses["l_bt"] = 0.0

        for key, value in losses.items():
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite loss term {key} = {value} at step {self.step}")

        # Phase 4a: policy update (masking loss only).
        if self.opt_policy is not None and aim_terms:
            policy_loss = aim_terms[0]
            for term in aim_terms[1:]:
                policy_loss = policy_loss + term
            policy_loss = policy_loss * cfg.w_aim
            self.opt_policy.zero_grad()
            policy_loss.backward()
            self.opt_policy.step()

        # Phase 4b: backbone update (reconstruction + weighted alignment).
        rec_total = rec_terms[0]
        for term in rec_terms[1:]:
            rec_total = rec_total + term
        if cfg.rec_reduction == "mean":
            rec_total = rec_total * (1.0 / len(rec_terms))
        backbone_loss = rec_total * cfg.w_rec
        if bt is not None:
            backbone_loss = backbone_loss + bt * cfg.w_bt
        self.opt_backbone.zero_grad()
        backbone_loss.backward()
        self.opt_backbone.step()

        self.step += 1
        rec_logged = sum(losses[f"l_rec_{m}"] for m in cfg.modalities())
        if cfg.rec_reduction == "mean":
            rec_logged /= len(cfg.modalities())
        aim_logged = sum(losses[f"l_aim_{m}"] for m in cfg.modalities())
        losses["total"] = cfg.w_rec * rec_logged + cfg.w_aim * aim_logged + cfg.w_bt * losses["l_bt"]
        return losses

    # ---- persistence --------------------------------------------------------

    def save(self, path):
        arrays = {f"param/{k}": p.data for k, p in self.named_parameters().items()}
        for group, opt in (("backbone", self.opt_backbone), ("policy", self.opt_policy)):
            if opt is None:
                continue
            state = opt.state_dict()
            for k, a in state["m"].items():
                arrays[f"opt/{group}/m/{k}"] = a
            for k, a in state["v"].items():
                arrays[f"opt/{group}/v/{k}"] = a
        meta = {
            "config": asdict(self.cfg),
            "config_hash": self.cfg.config_hash(),
            "shape": list(self.shape),
            "step": self.step,
            "opt_t": {
                "backbone": self.opt_backbone.t,
                "policy": self.opt_policy.t if self.opt_policy else 0,
            },
            "mask_rng_state": _encode_rng_state(self.mask_rng),
        }
        write_record(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, arrays)

    @classmethod
    def load(cls, path, cfg: TrainConfig | None = None) -> "PretrainState":
        meta, arrays = read_record(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        stored = TrainConfig(**_config_kwargs(meta["config"]))
        if cfg is not None and cfg.config_hash() != meta["config_hash"]:
            raise ConfigHashMismatchError(
                f"checkpoint config hash {meta['config_hash']} != requested {cfg.config_hash()}"
            )
        state = cls(stored, *meta["shape"])
        params = state.named_parameters()
        for key, arr in arrays.items():
            if key.startswith("param/"):
                name = key[len("param/") :]
                if name not in params:
                    raise ConfigHashMismatchError(f"unexpected parameter {name!r} in checkpoint")
                params[name].data[...] = arr
        for group, opt in (("backbone", state.opt_backbone), ("policy", state.opt_policy)):
            if opt is None:
                continue
            opt.t = int(meta["opt_t"][group])
            for p in opt.params:
                opt._m[p.name][...] = arrays[f"opt/{group}/m/{p.name}"]
                opt._v[p.name][...] = arrays[f"opt/{group}/v/{p.name}"]
        state.step = int(meta["step"])
        _restore_rng_state(state.mask_rng, meta["mask_rng_state"])
        return state


def _encode_rng_state(gen: np.random.Generator) -> dict:
    raw = gen.bit_generator.state
    return json.loads(json.dumps(raw, default=lambda o: o.tolist() if hasattr(o, "tolist") else o))


def _restore_rng_state(gen: np.random.Generator, state: dict):
    decoded = dict(state)
    inner = dict(decoded["state"])
    inner["counter"] = np.array(inner["counter"], dtype=np.uint64)
    inner["key"] = np.array(inner["key"], dtype=np.uint64)
    decoded["state"] = inner
    if "buffer" in decoded:
        decoded["buffer"] = np.array(decoded["buffer"], dtype=np.uint64)
    gen.bit_generator.state = decoded


def _config_kwargs(d: dict) -> dict:
    out = dict(d)
    out["patch"] = tuple(out["patch"])
    out["betas"] = tuple(out["betas"])
    return out


def iterate_batches(n: int, batch_size: int, epoch: int, seed: int):
    """Seeded full-epoch permutation; partial final batch kept if size >= 2."""
    order = make_rng(seed, 5, epoch).permutation(n)
    for start in range(0, n, batch_size):
        chunk = order[start : start + batch_size]
        if chunk.size >= 2:
            yield chunk


@dataclass
class PretrainResult:
    state: PretrainState
    log: MetricsLog


def pretrain_run(
    amplitude: np.ndarray,
    phase: np.ndarray,
    cfg: TrainConfig,
    state: PretrainState | None = None,
    log: MetricsLog | None = None,
    epochs: int | None = None,
    max_steps: int | None = None,
) -> PretrainResult:
    """Run (or resume) pre-training over the given preprocessed arrays.

    Resumption is exact: the step counter determines the epoch and the
    position inside the epoch's seeded permutation, so a loaded checkpoint
    continues on the same batch sequence it would have seen uninterrupted.
    """
    if amplitude.shape != phase.shape:
        raise DimensionError("amplitude/phase arrays must share a shape")
    n = amplitude.shape[0]
    if n == 0:
        raise ConfigError("empty dataset")
    amplitude = np.ascontiguousarray(amplitude, dtype=np.float32)
    phase = np.ascontiguousarray(phase, dtype=np.float32)
    if state is None:
        state = PretrainState(cfg, *amplitude.shape[1:])
    if log is None:
        log = MetricsLog()
    total_epochs = cfg.epochs if epochs is None else epochs
    steps_per_epoch = len(list(iterate_batches(n, cfg.batch_size, 0, cfg.seed)))
    if steps_per_epoch == 0:
        raise ConfigError("dataset too small for batches of at least 2")
    total_steps = total_epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    start = time.monotonic()
    while state.step < total_steps:
        epoch = state.step // steps_per_epoch
        offset = state.step % steps_per_epoch
        batches = list(iterate_batches(n, cfg.batch_size, epoch, cfg.seed))
        for idx in batches[offset:]:
            losses = state.step_once(amplitude[idx], phase[idx])
            log.append(
                step=state.step,
                epoch=epoch,
                l_rec_amplitude=losses["l_rec_amplitude"],
                l_rec_phase=losses["l_rec_phase"],
                l_bt=losses["l_bt"],
                l_aim_amplitude=losses["l_aim_amplitude"],
                l_aim_phase=losses["l_aim_phase"],
                total=losses["total"],
                wall_time=time.monotonic() - start,
            )
            if state.step >= total_steps:
                break
    return PretrainResult(state=state, log=log)


def extract_latents(state: PretrainState, amplitude: np.ndarray, phase: np.ndarray,
                    batch_size: int = 128) -> dict[str, np.ndarray]:
    """Frozen-encoder latents per modality over a whole array."""
    out: dict[str, list[np.ndarray]] = {m: [] for m in state.cfg.modalities()}
    arrays = {"amplitude": amplitude, "phase": phase}
    n = amplitude.shape[0]
    with no_grad():
        for startx in range(0, n, batch_size):
            for mod in state.cfg.modalities():
                chunk = arrays[mod][startx : startx + batch_size].astype(np.float32)
                out[mod].append(state.encoders[mod](Tensor(chunk)).data)
    return {m: np.concatenate(v) for m, v in out.items()}
