"""Flat ``key = value`` experiment configuration.

Lines starting with ``#`` are comments. Unknown keys are rejected; missing
keys take the defaults below (which follow the paper-scale protocol).
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigurationError
from .training import TrainConfig

DEFAULTS: dict[str, object] = {
    "mask.rate": 0.2,
    "mask.center": 0.08,
    "mask.seed": 0,
    "mask.resample": False,
    "data.height": 64,
    "data.width": 64,
    "data.n_train": 24,
    "data.n_test": 8,
    "data.seed": 0,
    "data.augment": True,
    "data.train_volume": "",
    "data.test_volume": "",
    "model.depth": 3,
    "model.base_channels": 32,
    "model.channel_growth": 2,
    "model.blocks": 5,
    "model.residual_head_init": "zero",
    "train.seed": 0,
    "train.learning_rate": 0.0005,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.lambda": 0.01,
    "train.mrn_iterations": 30000,
    "train.mrn_batch": 4,
    "train.msn_iterations": 60000,
    "train.msn_batch": 16,
    "train.msn_patch": 64,
    "train.finetune_iterations": 8000,
    "train.finetune_batch": 4,
    "train.checkpoint_every": 0,
    "train.monotone_window": 0,
    "train.monotone_tolerance": 0.0,
    "train.threads": 1,
    "eval.hd_spacing": 1.0,
    "eval.recon_only": False,
    "eval.sweep_blocks": "1,2,3,4,5",
    "eval.sweep_mrn_iterations": 1000,
    "eval.sweep_finetune_iterations": 200,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class ExperimentConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, value) if isinstance(value, str) else value

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigurationError(f"unknown config key {key!r}")
        return self.values[key]

    @classmethod
    def parse(cls, text: str) -> ExperimentConfig:
        values: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key = value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key in values:
                raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
            values[key] = raw
        return cls(values)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} not found")
        return cls.parse(path.read_text(encoding="utf-8"))

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.values.items())

    def train_config(self, phase: str, out_dir=None, **overrides) -> TrainConfig:
        v = self.values
        per_phase = {
            "pretrain_mrn": (v["train.mrn_iterations"], v["train.mrn_batch"], None),
            "pretrain_msn": (v["train.msn_iterations"], v["train.msn_batch"], v["train.msn_patch"] or None),
            "finetune_joint": (v["train.finetune_iterations"], v["train.finetune_batch"], None),
            "finetune_recon_only": (v["train.finetune_iterations"], v["train.finetune_batch"], None),
        }
        iterations, batch, patch = per_phase[phase]
        kwargs = dict(
            phase=phase,
            iterations=iterations,
            batch_size=batch,
            patch_size=patch,
            learning_rate=v["train.learning_rate"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            lam=v["train.lambda"],
            n_blocks=v["model.blocks"],
            seed=v["train.seed"],
            depth=v["model.depth"],
            base_channels=v["model.base_channels"],
            channel_growth=v["model.channel_growth"],
            residual_head_init=v["model.residual_head_init"],
            mask_rate=v["mask.rate"],
            mask_center=v["mask.center"],
            mask_seed=v["mask.seed"],
            resample_mask=v["mask.resample"],
            augment=v["data.augment"],
            checkpoint_every=v["train.checkpoint_every"],
            monotone_window=v["train.monotone_window"],
            monotone_tolerance=v["train.monotone_tolerance"],
            out_dir=None if out_dir is None else str(out_dir),
        )
        kwargs.update(overrides)
        return TrainConfig(**kwargs)

    def sweep_blocks(self) -> list[int]:
        try:
            blocks = [int(b) for b in str(self.values["eval.sweep_blocks"]).split(",") if b.strip()]
        except ValueError:
            raise ConfigurationError(f"eval.sweep_blocks: bad list {self.values['eval.sweep_blocks']!r}") from None
        if not blocks or min(blocks) < 1:
            raise ConfigurationError("eval.sweep_blocks needs positive block counts")
        return blocks


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
