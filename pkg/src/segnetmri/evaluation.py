"""Inference helpers and the method comparison used by the CLI and acceptance tests."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .kspace import SamplingMask, forward_undersample, zero_filled
from .metrics import MetricsReport, SamplePrediction, evaluate_dataset
from .networks import MRN, MSN, SegNetMRI
from .phantom import LabeledSample


def _batches(samples: Sequence[LabeledSample], size: int):
    for i in range(0, len(samples), size):
        yield samples[i : i + size]


def _measure(batch, mask: SamplingMask, dtype=torch.complex64):
    images = torch.from_numpy(np.stack([s.image for s in batch])).to(dtype)
    m = torch.from_numpy(mask.mask).to(images.real.dtype)
    return forward_undersample(images, m)


@torch.no_grad()
def zero_filled_images(samples, mask: SamplingMask) -> list[np.ndarray]:
    out = []
    for batch in _batches(samples, 8):
        out.extend(zero_filled(_measure(batch, mask)).numpy())
    return out


@torch.no_grad()
def reconstruct(mrn: MRN, samples, mask: SamplingMask, batch_size: int = 8) -> list[np.ndarray]:
    """Final-block complex reconstructions, in inference mode."""
    mrn.eval()
    out = []
    for batch in _batches(samples, batch_size):
        final, _, _ = mrn(_measure(batch, mask))
        out.extend(final.numpy())
    return out


@torch.no_grad()
def segment(msn: MSN, images: Sequence[np.ndarray], batch_size: int = 8) -> list[np.ndarray]:
    """Class probabilities (C, H, W) for each magnitude image."""
    msn.eval()
    out = []
    for i in range(0, len(images), batch_size):
        chunk = torch.from_numpy(np.stack([np.abs(x) for x in images[i : i + batch_size]])).float()
        out.extend(msn(chunk).numpy())
    return out


@torch.no_grad()
def run_segnetmri(model: SegNetMRI, samples, mask: SamplingMask, batch_size: int = 8) -> dict:
    """Returns reconstructions, merged probabilities and per-block probabilities per sample."""
    model.eval()
    recon, merged, blocks = [], [], []
    for batch in _batches(samples, batch_size):
        out = model(_measure(batch, mask))
        recon.extend(out.reconstruction.numpy())
        merged.extend(out.merged_segmentation.numpy())
        per = torch.stack(out.per_block_segmentations, dim=1).numpy()
        blocks.extend(per)
    return {"reconstruction": recon, "merged": merged, "per_block": blocks}


def labels_from_probs(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=-3).astype(np.int32)


def report(samples, images=None, probs=None, spacing: float = 1.0) -> MetricsReport:
    preds = []
    for i in range(len(samples)):
        preds.append(
            SamplePrediction(
                labels=None if probs is None else labels_from_probs(probs[i]),
                image=None if images is None else images[i],
            )
        )
    return evaluate_dataset(preds, samples, spacing)


def compare_methods(
    samples,
    mask: SamplingMask,
    msn: MSN,
    mrn: MRN | None = None,
    segnet: SegNetMRI | None = None,
    recon_only_mrn: MRN | None = None,
    spacing: float = 1.0,
) -> dict[str, MetricsReport]:
    """Metrics for every available method, keyed in the layout of the comparison tables."""
    reports: dict[str, MetricsReport] = {}
    zf = zero_filled_images(samples, mask)
    reports["ZF+MSN"] = report(samples, zf, segment(msn, zf), spacing)
    if mrn is not None:
        rec = reconstruct(mrn, samples, mask)
        reports[f"MRN{mrn.n_blocks}+MSN"] = report(samples, rec, segment(msn, rec), spacing)
    if recon_only_mrn is not None:
        rec = reconstruct(recon_only_mrn, samples, mask)
        reports["ReconOnly+MSN"] = report(samples, rec, segment(msn, rec), spacing)
    if segnet is not None:
        out = run_segnetmri(segnet, samples, mask)
        reports[f"SegNetMRI{segnet.n_blocks}"] = report(samples, out["reconstruction"], out["merged"], spacing)
    fs = [s.image for s in samples]
    reports["FS+MSN"] = report(samples, None, segment(msn, fs), spacing)
    return reports
