"""Pre-training, joint fine-tuning, the recon-only ablation and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .container import MANIFEST_KEY, decode_manifest, encode_manifest, read_container, write_container
from .errors import ConfigurationError, ContainerFormatError, ParameterError, TrainingDivergedError
from .kspace import KSpaceMeasurement, forward_undersample, make_cartesian_mask
from .losses import mrn_loss, msn_loss, segnetmri_loss
from .networks import MRN, MSN, EncoderDecoderConfig, SegNetMRI, xavier_init
from .phantom import NUM_CLASSES, LabeledSample, augment, crop_patches

log = logging.getLogger(__name__)

PHASES = ("pretrain_mrn", "pretrain_msn", "finetune_joint", "finetune_recon_only")

# iterations, batch size, patch size
_PHASE_DEFAULTS = {
    "pretrain_mrn": (30_000, 4, None),
    "pretrain_msn": (60_000, 16, 64),
    "finetune_joint": (8_000, 4, None),
    "finetune_recon_only": (8_000, 4, None),
}


@dataclass
class TrainConfig:
    phase: str
    iterations: int
    batch_size: int
    patch_size: int | None = None
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lam: float = 0.01
    n_blocks: int = 5
    seed: int = 0
    depth: int = 3
    base_channels: int = 32
    channel_growth: int = 2
    mask_rate: float = 0.2
    mask_center: float = 0.08
    mask_seed: int = 0
    resample_mask: bool = False
    augment: bool = True
    checkpoint_every: int = 0
    out_dir: str | None = None
    # abort when a window-mean of the loss rises by more than the tolerance
    monotone_window: int = 0
    monotone_tolerance: float = 0.0
    # "zero" starts each MRN block as identity + data fidelity; "xavier" leaves the head random
    residual_head_init: str = "zero"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ParameterError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ParameterError("iterations must be >= 0 and batch_size >= 1")
        if self.lam < 0:
            raise ParameterError("lambda must be non-negative")
        if self.n_blocks < 1:
            raise ParameterError("n_blocks must be >= 1")
        if self.residual_head_init not in ("zero", "xavier"):
            raise ParameterError(f"residual_head_init must be 'zero' or 'xavier', got {self.residual_head_init!r}")

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> TrainConfig:
        if phase not in _PHASE_DEFAULTS:
            raise ParameterError(f"unknown phase {phase!r}")
        iterations, batch, patch = _PHASE_DEFAULTS[phase]
        base = dict(phase=phase, iterations=iterations, batch_size=batch, patch_size=patch)
        base.update(overrides)
        return cls(**base)

    @property
    def model_config(self) -> EncoderDecoderConfig:
        return EncoderDecoderConfig(self.depth, self.base_channels, self.channel_growth)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Checkpoint:
    """Trained parameters plus the config and state that produced them.

    ``kind`` is one of "mrn", "msn", "segnetmri".
    """

    kind: str
    params: dict[str, np.ndarray]
    config: TrainConfig
    iteration: int
    model: dict
    metrics: dict = field(default_factory=dict)
    loss_log: list[dict] = field(default_factory=list, repr=False)

    def build(self) -> torch.nn.Module:
        net = build_model(self.kind, self.model)
        state = {}
        own = net.state_dict()
        missing = set(own) - set(self.params)
        unexpected = set(self.params) - set(own)
        if missing or unexpected:
            raise ConfigurationError(
                f"{self.kind} checkpoint incomplete: missing {sorted(missing)[:5]}, "
                f"unexpected {sorted(unexpected)[:5]}"
            )
        for name, ref in own.items():
            arr = self.params[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise ConfigurationError(f"parameter {name}: shape {arr.shape} vs model {tuple(ref.shape)}")
            state[name] = torch.from_numpy(np.array(arr)).to(ref.dtype)
        net.load_state_dict(state)
        net.eval()
        return net

    def save(self, path) -> None:
        entries = {}
        int64_names = []
        for name, arr in self.params.items():
            if arr.dtype == np.int64:
                int64_names.append(name)
                arr = arr.astype(np.int32)
            entries[name] = arr
        manifest = {
            "kind": self.kind,
            "model": self.model,
            # out_dir is where this run happened, not how; keep it out so copies compare equal
            "config": {k: v for k, v in self.config.to_dict().items() if k != "out_dir"},
            "iteration": self.iteration,
            "metrics": self.metrics,
            "int64": int64_names,
        }
        entries[MANIFEST_KEY] = encode_manifest(manifest)
        write_container(path, entries)

    @classmethod
    def load(cls, path) -> Checkpoint:
        entries = read_container(path)
        if MANIFEST_KEY not in entries:
            raise ContainerFormatError(f"{path}: no manifest entry; not a checkpoint")
        manifest = decode_manifest(entries.pop(MANIFEST_KEY))
        for name in manifest.get("int64", []):
            entries[name] = entries[name].astype(np.int64)
        return cls(
            kind=manifest["kind"],
            params=entries,
            config=TrainConfig.from_dict(manifest["config"]),
            iteration=int(manifest["iteration"]),
            model=manifest["model"],
            metrics=manifest.get("metrics", {}),
        )


def build_model(kind: str, model: dict) -> torch.nn.Module:
    cfg = EncoderDecoderConfig(model["depth"], model["base_channels"], model["channel_growth"])
    if kind == "mrn":
        return MRN(cfg, model["n_blocks"])
    if kind == "msn":
        return MSN(cfg, model.get("n_classes", NUM_CLASSES))
    if kind == "segnetmri":
        return SegNetMRI(cfg, model["n_blocks"], model.get("n_classes", NUM_CLASSES))
    raise ConfigurationError(f"unknown model kind {kind!r}")


def _model_meta(net) -> dict:
    c = net.config
    meta = {"depth": c.depth, "base_channels": c.base_channels, "channel_growth": c.channel_growth}
    meta["n_blocks"] = getattr(net, "n_blocks", 0)
    meta["n_classes"] = getattr(net, "n_classes", NUM_CLASSES)
    return meta


def _state_numpy(net) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}


def _make_checkpoint(kind, net, config, iteration, loss_log) -> Checkpoint:
    metrics = {}
    if loss_log:
        tail = [r["loss"] for r in loss_log[-100:]]
        metrics = {"final_loss": loss_log[-1]["loss"], "smoothed_loss": float(np.mean(tail))}
    return Checkpoint(kind, _state_numpy(net), config, iteration, _model_meta(net), metrics, list(loss_log))


class _Trainer:
    """Shared optimizer loop: batching, logging, divergence checks, checkpoints."""

    def __init__(self, dataset: Sequence[LabeledSample], config: TrainConfig, kind: str, net, params):
        if len(dataset) == 0:
            raise ParameterError("training dataset is empty")
        self.dataset = list(dataset)
        self.config = config
        self.kind = kind
        self.net = net
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = torch.optim.Adam(
            params, lr=config.learning_rate, betas=(config.beta1, config.beta2)
        )
        h, w = self.dataset[0].shape
        self.fixed_mask = make_cartesian_mask(h, w, config.mask_rate, config.mask_center, config.mask_seed)
        self.loss_log: list[dict] = []
        self.out_dir = Path(config.out_dir) if config.out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def sample_batch(self, size: int) -> list[LabeledSample]:
        idx = self.rng.choice(len(self.dataset), size=size, replace=len(self.dataset) < size)
        batch = [self.dataset[i] for i in idx]
        if self.config.augment:
            seeds = self.rng.integers(0, 2**31, size=len(batch))
            batch = [augment(s, int(sd)) for s, sd in zip(batch, seeds)]
        return batch

    def measurement(self, images: torch.Tensor) -> KSpaceMeasurement:
        mask = self.fixed_mask
        if self.config.resample_mask:
            h, w = images.shape[-2:]
            seed = int(self.rng.integers(0, 2**31))
            mask = make_cartesian_mask(h, w, self.config.mask_rate, self.config.mask_center, seed)
        m = torch.from_numpy(mask.mask).to(torch.float32)
        return forward_undersample(images, m)

    def step(self, iteration: int, loss) -> None:
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"{self.config.phase}: non-finite loss at iteration {iteration}: "
                f"{loss.component_items()}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        self.optimizer.step()
        self.loss_log.append({"iteration": iteration, "loss": value, **loss.component_items()})
        self._check_monotone(iteration)
        every = self.config.checkpoint_every
        if self.out_dir and every and iteration % every == 0:
            _make_checkpoint(self.kind, self.net, self.config, iteration, self.loss_log).save(
                self.out_dir / f"{self.kind}_{self.config.phase}_{iteration:06d}.snmt"
            )

    def _check_monotone(self, iteration: int) -> None:
        w = self.config.monotone_window
        n = len(self.loss_log)
        if not w or n < 2 * w or n % w:
            return
        prev = np.mean([r["loss"] for r in self.loss_log[-2 * w : -w]])
        last = np.mean([r["loss"] for r in self.loss_log[-w:]])
        if last > prev * (1 + self.config.monotone_tolerance):
            raise TrainingDivergedError(
                f"{self.config.phase}: smoothed loss rose from {prev:.6g} to {last:.6g} "
                f"at iteration {iteration} (window {w})"
            )

    def finish(self) -> Checkpoint:
        ckpt = _make_checkpoint(self.kind, self.net, self.config, len(self.loss_log), self.loss_log)
        if self.out_dir:
            write_loss_csv(self.out_dir / f"{self.config.phase}_loss.csv", self.loss_log)
        return ckpt


def _stack_images(batch: Sequence[LabeledSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in batch])).to(torch.complex64)


def _stack_labels(batch: Sequence[LabeledSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.labels for s in batch]).astype(np.int64))


def _check_phase(config: TrainConfig, phase: str) -> None:
    if config.phase != phase:
        raise ConfigurationError(f"expected a {phase} config, got phase {config.phase!r}")


def pretrain_mrn(dataset: Sequence[LabeledSample], config: TrainConfig) -> Checkpoint:
    """Train MRN_N on (undersampled, fully-sampled) pairs with the l2 loss."""
    _check_phase(config, "pretrain_mrn")
    torch.manual_seed(config.seed)
    net = MRN(config.model_config, config.n_blocks)
    xavier_init(net)
    if config.residual_head_init == "zero":
        net.zero_residual_heads()
    net.train()
    trainer = _Trainer(dataset, config, "mrn", net, net.parameters())
    for it in range(1, config.iterations + 1):
        target = _stack_images(trainer.sample_batch(config.batch_size))
        recon, _, _ = net(trainer.measurement(target))
        trainer.step(it, mrn_loss(recon, target))
    return trainer.finish()


def pretrain_msn(dataset: Sequence[LabeledSample], config: TrainConfig) -> Checkpoint:
    """Train the MSN on fully-sampled magnitude patches with pixel-wise cross-entropy."""
    _check_phase(config, "pretrain_msn")
    torch.manual_seed(config.seed)
    net = MSN(config.model_config)
    xavier_init(net)
    net.train()
    trainer = _Trainer(dataset, config, "msn", net, net.parameters())
    for it in range(1, config.iterations + 1):
        batch = trainer.sample_batch(config.batch_size)
        if config.patch_size:
            seeds = trainer.rng.integers(0, 2**31, size=len(batch))
            batch = [crop_patches(s, config.patch_size, 1, int(sd))[0] for s, sd in zip(batch, seeds)]
        images = _stack_images(batch).abs()
        probs = net(images)
        trainer.step(it, msn_loss(probs, _stack_labels(batch)))
    return trainer.finish()


def _check_pair(mrn_ckpt: Checkpoint, msn_ckpt: Checkpoint) -> None:
    if mrn_ckpt.kind != "mrn" or msn_ckpt.kind != "msn":
        raise ConfigurationError(f"expected (mrn, msn) checkpoints, got ({mrn_ckpt.kind}, {msn_ckpt.kind})")
    keys = ("depth", "base_channels", "channel_growth")
    a = tuple(mrn_ckpt.model[k] for k in keys)
    b = tuple(msn_ckpt.model[k] for k in keys)
    if a != b:
        raise ConfigurationError(f"MRN architecture {a} does not match MSN architecture {b}")


def finetune_segnetmri(
    dataset: Sequence[LabeledSample], mrn_ckpt: Checkpoint, msn_ckpt: Checkpoint, config: TrainConfig
) -> Checkpoint:
    """Fuse the pre-trained networks into SegNetMRI and train it end to end."""
    _check_phase(config, "finetune_joint")
    _check_pair(mrn_ckpt, msn_ckpt)
    torch.manual_seed(config.seed)
    net = SegNetMRI.from_pretrained(mrn_ckpt.build(), msn_ckpt.build())
    net.train()
    trainer = _Trainer(dataset, config, "segnetmri", net, net.parameters())
    for it in range(1, config.iterations + 1):
        batch = trainer.sample_batch(config.batch_size)
        target = _stack_images(batch)
        outputs = net(trainer.measurement(target))
        trainer.step(it, segnetmri_loss(outputs, target, _stack_labels(batch), config.lam))
    return trainer.finish()


def finetune_recon_only(
    dataset: Sequence[LabeledSample], mrn_ckpt: Checkpoint, msn_ckpt: Checkpoint, config: TrainConfig
) -> Checkpoint:
    """Ablation: train only the MRN under ``L_MRN + lam * L_MSN(MSN(|recon|))``.

    The MSN stays frozen in inference mode; the returned checkpoint holds the
    updated MRN.
    """
    _check_phase(config, "finetune_recon_only")
    _check_pair(mrn_ckpt, msn_ckpt)
    torch.manual_seed(config.seed)
    mrn = mrn_ckpt.build()
    msn = msn_ckpt.build()
    msn.eval()
    for p in msn.parameters():
        p.requires_grad_(False)
    mrn.train()
    trainer = _Trainer(dataset, config, "mrn", mrn, mrn.parameters())
    for it in range(1, config.iterations + 1):
        batch = trainer.sample_batch(config.batch_size)
        target = _stack_images(batch)
        recon, _, _ = mrn(trainer.measurement(target))
        rec = mrn_loss(recon, target)
        seg = msn_loss(msn(recon.abs()), _stack_labels(batch))
        total = rec.total + config.lam * seg.total
        loss = type(rec)(total, {"mrn": rec.total, "msn": seg.total})
        trainer.step(it, loss)
    return trainer.finish()


def write_loss_csv(path, loss_log: list[dict]) -> None:
    if not loss_log:
        Path(path).write_text("iteration,loss\n")
        return
    keys = list(loss_log[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        writer.writerows(loss_log)

