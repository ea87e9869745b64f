"""Command-line entry point: ``segnetmri <command> ...``.

A run directory holds one experiment: its config, data, checkpoints, logs
and reports. Every command reads ``<run-dir>/config.txt`` unless
``--config`` is given, in which case that file is copied there first.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .container import read_container, write_container
from .errors import ConfigurationError, SegNetMRIError, TrainingDivergedError
from .evaluation import compare_methods, labels_from_probs, reconstruct, run_segnetmri, segment
from .kspace import make_cartesian_mask
from .metrics import (
    SamplePrediction,
    evaluate_dataset,
    format_reconstruction_table,
    format_segmentation_table,
    reports_to_csv,
)
from .phantom import LabeledSample, load_volume, make_phantom_split, save_volume
from .plots import plot_block_sweep, plot_loss_curve
from .training import (
    Checkpoint,
    finetune_recon_only,
    finetune_segnetmri,
    pretrain_mrn,
    pretrain_msn,
)

log = logging.getLogger("segnetmri")

CHECKPOINTS = {
    "pretrain_mrn": "mrn.snmt",
    "pretrain_msn": "msn.snmt",
    "finetune_joint": "segnetmri.snmt",
    "finetune_recon_only": "recon_only.snmt",
}


class Run:
    """Paths and config of one run directory."""

    def __init__(self, run_dir, config_path=None):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        stored = self.dir / "config.txt"
        if config_path is not None:
            cfg = ExperimentConfig.load(config_path)
            text = cfg.dumps()
            if stored.exists() and stored.read_text(encoding="utf-8") != text:
                raise ConfigurationError(f"{self.dir} already holds a different config.txt")
            stored.write_text(text, encoding="utf-8")
        elif not stored.exists():
            raise ConfigurationError(f"{self.dir} has no config.txt; pass --config")
        self.cfg = ExperimentConfig.load(stored)
        torch.set_num_threads(max(1, int(self.cfg["train.threads"])))
        for sub in ("data", "logs", "eval"):
            (self.dir / sub).mkdir(exist_ok=True)

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def data(self, split: str) -> list[LabeledSample]:
        path = self.path("data", f"{split}.snmt")
        if not path.exists():
            raise ConfigurationError(f"{path} missing; run gen-phantoms first")
        return load_volume(path)

    def checkpoint(self, phase: str) -> Checkpoint:
        path = self.path(CHECKPOINTS[phase])
        if not path.exists():
            raise ConfigurationError(f"{path} missing; run the {phase} step first")
        return Checkpoint.load(path)

    def mask(self):
        c = self.cfg
        return make_cartesian_mask(c["data.height"], c["data.width"], c["mask.rate"], c["mask.center"], c["mask.seed"])


def _save_checkpoint(run: Run, phase: str, ckpt: Checkpoint) -> None:
    for name, arr in ckpt.params.items():
        if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
            raise TrainingDivergedError(f"{phase}: parameter {name} is not finite")
    ckpt.save(run.path(CHECKPOINTS[phase]))
    if ckpt.loss_log:
        plot_loss_curve(ckpt.loss_log, run.path("logs", f"{phase}_loss.png"), title=phase)
    log.info("%s: %d iterations, final loss %s", phase, ckpt.iteration, ckpt.metrics.get("final_loss"))


def cmd_make_mask(args) -> None:
    mask = make_cartesian_mask(args.h, args.w, args.rate, args.center, args.seed)
    write_container(args.out, {"mask": mask.mask})
    print(f"sampled rows: {len(mask.sampled_rows())}/{args.h}  achieved rate: {mask.achieved_rate:.4f}")


def cmd_gen_phantoms(args) -> None:
    run = Run(args.run_dir, args.config)
    c = run.cfg
    if c["data.train_volume"]:
        train = load_volume(c["data.train_volume"])
        test = load_volume(c["data.test_volume"]) if c["data.test_volume"] else []
    else:
        split = make_phantom_split(c["data.n_train"], c["data.n_test"], c["data.height"], c["data.width"], c["data.seed"])
        train, test = split.train, split.test
    save_volume(run.path("data", "train.snmt"), train)
    if test:
        save_volume(run.path("data", "test.snmt"), test)
    print(f"wrote {len(train)} training and {len(test)} test slices to {run.path('data')}")


def cmd_pretrain_mrn(args) -> None:
    run = Run(args.run_dir, args.config)
    ckpt = pretrain_mrn(run.data("train"), run.cfg.train_config("pretrain_mrn", out_dir=run.path("logs")))
    _save_checkpoint(run, "pretrain_mrn", ckpt)


def cmd_pretrain_msn(args) -> None:
    run = Run(args.run_dir, args.config)
    ckpt = pretrain_msn(run.data("train"), run.cfg.train_config("pretrain_msn", out_dir=run.path("logs")))
    _save_checkpoint(run, "pretrain_msn", ckpt)


def cmd_finetune(args) -> None:
    run = Run(args.run_dir, args.config)
    mrn, msn = run.checkpoint("pretrain_mrn"), run.checkpoint("pretrain_msn")
    phase = "finetune_recon_only" if args.recon_only else "finetune_joint"
    fn = finetune_recon_only if args.recon_only else finetune_segnetmri
    ckpt = fn(run.data("train"), mrn, msn, run.cfg.train_config(phase, out_dir=run.path("logs")))
    _save_checkpoint(run, phase, ckpt)


def _write_reports(out_dir: Path, reports) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(reports_to_csv(reports))
    seg_table = format_segmentation_table(reports)
    (out_dir / "segmentation_table.txt").write_text(seg_table)
    print(seg_table)
    if any(r.psnr is not None for r in reports.values()):
        rec_table = format_reconstruction_table(reports)
        (out_dir / "reconstruction_table.txt").write_text(rec_table)
        print(rec_table)


def _label_volume(path) -> np.ndarray:
    entries = read_container(path)
    if "labels" not in entries:
        raise ConfigurationError(f"{path} has no 'labels' entry")
    labels = entries["labels"]
    return labels[..., None] if labels.ndim == 2 else labels


def cmd_evaluate(args) -> None:
    if args.seg or args.ref:
        if not (args.seg and args.ref and args.out):
            raise ConfigurationError("--seg, --ref and --out must be given together")
        seg, ref = _label_volume(args.seg), _label_volume(args.ref)
        if seg.shape != ref.shape:
            raise ConfigurationError(f"segmentation {seg.shape} and reference {ref.shape} differ")
        refs = [LabeledSample(np.zeros(ref.shape[:2]), ref[..., k]) for k in range(ref.shape[-1])]
        preds = [SamplePrediction(labels=seg[..., k]) for k in range(seg.shape[-1])]
        _write_reports(Path(args.out), {args.name: evaluate_dataset(preds, refs, args.spacing)})
        return
    run = Run(args.run_dir, args.config)
    samples = run.data("test")
    msn = run.checkpoint("pretrain_msn").build()
    mrn = run.checkpoint("pretrain_mrn").build()
    segnet = run.checkpoint("finetune_joint").build() if run.path(CHECKPOINTS["finetune_joint"]).exists() else None
    recon_only = None
    if run.path(CHECKPOINTS["finetune_recon_only"]).exists():
        recon_only = run.checkpoint("finetune_recon_only").build()
    reports = compare_methods(samples, run.mask(), msn, mrn, segnet, recon_only, run.cfg["eval.hd_spacing"])
    _write_reports(run.path("eval"), reports)


def _input_samples(run: Run, path) -> list[LabeledSample]:
    return load_volume(path) if path else run.data("test")


def cmd_reconstruct(args) -> None:
    run = Run(args.run_dir, args.config)
    samples = _input_samples(run, args.input)
    if args.model == "segnetmri":
        recon = run_segnetmri(run.checkpoint("finetune_joint").build(), samples, run.mask())["reconstruction"]
    else:
        recon = reconstruct(run.checkpoint("pretrain_mrn").build(), samples, run.mask())
    vol = np.stack(recon, axis=-1).astype(np.complex64)
    write_container(args.out, {"recon": vol, "magnitude": np.abs(vol).astype(np.float32)})
    print(f"wrote {vol.shape[-1]} reconstructions to {args.out}")


def cmd_segment(args) -> None:
    run = Run(args.run_dir, args.config)
    samples = _input_samples(run, args.input)
    if args.model == "segnetmri":
        probs = run_segnetmri(run.checkpoint("finetune_joint").build(), samples, run.mask())["merged"]
    else:
        probs = segment(run.checkpoint("pretrain_msn").build(), [s.image for s in samples])
    probs = np.stack(probs, axis=-1)  # C, H, W, K
    labels = labels_from_probs(np.moveaxis(probs, -1, 0))
    write_container(
        args.out,
        {"probs": np.moveaxis(probs, 0, 2).astype(np.float32), "labels": np.moveaxis(labels, 0, -1).astype(np.int32)},
    )
    print(f"wrote {labels.shape[0]} segmentations to {args.out}")


def cmd_sweep_blocks(args) -> None:
    run = Run(args.run_dir, args.config)
    c = run.cfg
    train, test = run.data("train"), run.data("test")
    msn_ckpt = run.checkpoint("pretrain_msn")
    rows = []
    for n in c.sweep_blocks():
        mrn_cfg = c.train_config("pretrain_mrn", n_blocks=n, iterations=c["eval.sweep_mrn_iterations"])
        mrn = pretrain_mrn(train, mrn_cfg)
        ft_cfg = c.train_config("finetune_joint", n_blocks=n, iterations=c["eval.sweep_finetune_iterations"])
        segnet = finetune_segnetmri(train, mrn, msn_ckpt, ft_cfg)
        report = compare_methods(test, run.mask(), msn_ckpt.build(), segnet=segnet.build())[f"SegNetMRI{n}"]
        rows.append({"blocks": n, "psnr": report.psnr, "nmse": report.nmse, "dice": report.mean_dice()})
        log.info("N=%d: PSNR %.2f dB, mean Dice %.2f", n, report.psnr, report.mean_dice())
    with open(run.path("eval", "block_sweep.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["blocks", "psnr", "nmse", "dice"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    plot_block_sweep(rows, run.path("eval", "block_sweep.png"))
    for r in rows:
        print(f"N={r['blocks']}: PSNR {r['psnr']:.2f} dB  NMSE {r['nmse']:.4f}  mean Dice {r['dice']:.2f}")


def cmd_run(args) -> None:
    """gen-phantoms -> pretrain MRN -> pretrain MSN -> fine-tune -> evaluate."""
    cmd_gen_phantoms(args)
    args.config = None
    cmd_pretrain_mrn(args)
    cmd_pretrain_msn(args)
    args.recon_only = False
    cmd_finetune(args)
    if Run(args.run_dir).cfg["eval.recon_only"]:
        args.recon_only = True
        cmd_finetune(args)
    args.seg = args.ref = None
    cmd_evaluate(args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segnetmri", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-mask", help="write a Cartesian sampling mask")
    p.add_argument("--h", type=int, default=240)
    p.add_argument("--w", type=int, default=240)
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--center", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_mask)

    def run_parser(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--run-dir", required=True)
        p.add_argument("--config")
        p.set_defaults(func=func)
        return p

    run_parser("gen-phantoms", cmd_gen_phantoms, "generate (or import) train/test slices")
    run_parser("pretrain-mrn", cmd_pretrain_mrn, "pre-train the reconstruction network")
    run_parser("pretrain-msn", cmd_pretrain_msn, "pre-train the segmentation network")
    p = run_parser("finetune", cmd_finetune, "fine-tune SegNetMRI (or the recon-only ablation)")
    p.add_argument("--recon-only", action="store_true")

    p = sub.add_parser("evaluate", help="metrics tables for a run, or for two label volumes")
    p.add_argument("--run-dir")
    p.add_argument("--config")
    p.add_argument("--seg")
    p.add_argument("--ref")
    p.add_argument("--out")
    p.add_argument("--name", default="segmentation")
    p.add_argument("--spacing", type=float, default=1.0)
    p.set_defaults(func=cmd_evaluate)

    for name, func, choices in (
        ("reconstruct", cmd_reconstruct, ("segnetmri", "mrn")),
        ("segment", cmd_segment, ("segnetmri", "msn")),
    ):
        p = run_parser(name, func, f"{name} a volume with a trained model")
        p.add_argument("--input", help="volume file; defaults to the run's test set")
        p.add_argument("--out", required=True)
        p.add_argument("--model", choices=choices, default="segnetmri")

    run_parser("sweep-blocks", cmd_sweep_blocks, "PSNR / Dice against the number of blocks")
    run_parser("run", cmd_run, "full pipeline from one config file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "evaluate" and not args.seg and not args.run_dir:
        parser.error("evaluate needs --run-dir or --seg/--ref/--out")
    try:
        args.func(args)
    except SegNetMRIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
