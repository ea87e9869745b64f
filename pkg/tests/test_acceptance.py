"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``criterion N: PASS/FAIL`` line and the lines are
repeated in the terminal summary. Criteria 5-8 train small networks on CPU
and take several minutes each; they carry the ``slow`` marker.

    pytest tests/test_acceptance.py -v
"""

import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from segnetmri.evaluation import compare_methods, reconstruct, report, run_segnetmri, zero_filled_images
from segnetmri.kspace import KSpaceMeasurement, data_fidelity, fft2c, forward_undersample, make_cartesian_mask, zero_filled
from segnetmri.losses import mrn_loss, msn_loss, omsn_loss, segnetmri_loss
from segnetmri.metrics import avd, dice, hd95
from segnetmri.networks import SegNetMRIOutputs
from segnetmri.phantom import make_phantom_split
from segnetmri.training import Checkpoint, TrainConfig, finetune_segnetmri, pretrain_mrn, pretrain_msn

from test_losses import central_diff, rel_err
from test_metrics import hd95_oracle, random_pair

# desk scale: depth 2 / base 16 networks on 64x64 phantoms, one CPU thread
DESK = dict(depth=2, base_channels=16)
MASK = make_cartesian_mask(64, 64, 0.2, 0.08, 0)
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module", autouse=True)
def _single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(prev)


def _complex(gen, *shape):
    return torch.randn(*shape, dtype=torch.complex128, generator=gen)


def test_criterion_1_operators(record_criterion):
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(1)
    worst_adj = 0.0
    for i in range(100):
        mask = torch.from_numpy(make_cartesian_mask(32, 32, 0.25, 0.08, i).mask).double()
        x, v = _complex(gen, 32, 32), _complex(gen, 32, 32)
        y = KSpaceMeasurement(v * mask, mask)
        lhs = torch.vdot(forward_undersample(x, mask).values.flatten(), y.values.flatten())
        rhs = torch.vdot(x.flatten(), zero_filled(y).flatten())
        worst_adj = max(worst_adj, abs(lhs - rhs).item() / abs(lhs).item())
    full = torch.ones(32, 32, dtype=torch.float64)
    x = _complex(gen, 8, 32, 32)
    round_trip = (zero_filled(forward_undersample(x, full)) - x).abs().max().item()
    elapsed = time.perf_counter() - start
    ok = worst_adj <= 1e-10 and round_trip <= 1e-12 and elapsed < 10
    record_criterion(1, ok, f"adjoint rel {worst_adj:.2e} (<=1e-10), round trip {round_trip:.2e} (<=1e-12), {elapsed:.2f}s")
    assert ok


def test_criterion_2_data_fidelity(record_criterion):
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(2)
    errs = {}
    for dtype, real in ((torch.complex128, torch.float64), (torch.complex64, torch.float32)):
        worst_cons = worst_idem = 0.0
        for i in range(20):
            mask = torch.from_numpy(make_cartesian_mask(32, 32, 0.2, 0.08, i).mask).to(real)
            y = forward_undersample(_complex(gen, 4, 32, 32).to(dtype), mask)
            x = _complex(gen, 4, 32, 32).to(dtype)
            out = data_fidelity(x, y)
            worst_cons = max(worst_cons, (fft2c(out) * mask - y.values).abs().max().item())
            worst_idem = max(worst_idem, (data_fidelity(out, y) - out).abs().max().item())
        errs[dtype] = (worst_cons, worst_idem)
    elapsed = time.perf_counter() - start
    d, s = errs[torch.complex128], errs[torch.complex64]
    ok = max(d) <= 1e-12 and max(s) <= 1e-5 and elapsed < 10
    record_criterion(
        2, ok, f"double cons {d[0]:.1e} idem {d[1]:.1e} (<=1e-12), single cons {s[0]:.1e} idem {s[1]:.1e} (<=1e-5), {elapsed:.2f}s"
    )
    assert ok


def test_criterion_3_loss_gradients(record_criterion):
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(3)
    labels = torch.randint(0, 4, (2, 8, 8), generator=gen)
    errors = {}

    def check(name, f, *inputs):
        leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
        f(*leaves).backward()
        worst = 0.0
        for i, leaf in enumerate(leaves):
            def fi(t, i=i):
                args = [x.detach() for x in leaves]
                args[i] = t
                return f(*args)

            worst = max(worst, rel_err(leaf.grad, central_diff(fi, leaf.detach().clone())))
        errors[name] = worst

    x = torch.randn(2, 2, 8, 8, dtype=torch.float64, generator=gen)
    target = torch.randn(2, 2, 8, 8, dtype=torch.float64, generator=gen)
    check("mrn", lambda a: mrn_loss(a, target).total, x)

    logits = [torch.randn(2, 4, 8, 8, dtype=torch.float64, generator=gen) for _ in range(3)]
    check("msn", lambda z: msn_loss(torch.softmax(z, 1), labels).total, logits[0])
    check(
        "omsn",
        lambda m, b0, b1: omsn_loss(torch.softmax(m, 1), [torch.softmax(b0, 1), torch.softmax(b1, 1)], labels).total,
        *logits,
    )

    ctarget = _complex(gen, 2, 8, 8)

    def joint(r, m, b0, b1):
        recon = torch.view_as_complex(r)
        blocks = [torch.softmax(b0, 1), torch.softmax(b1, 1)]
        out = SegNetMRIOutputs(recon, [recon], blocks, torch.softmax(m, 1))
        return segnetmri_loss(out, ctarget, labels, 0.01).total

    check("segnetmri", joint, torch.view_as_real(_complex(gen, 2, 8, 8)), *logits)
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) <= 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    record_criterion(3, ok, f"FD rel errors {detail} (<=1e-4), {elapsed:.1f}s")
    assert ok


def test_criterion_4_metric_oracles(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_hd, mismatches, checked = 0.0, 0, 0
    for _ in range(50):
        seg, ref = random_pair(rng)
        for c in (1, 2, 3):
            na, nb = int((seg == c).sum()), int((ref == c).sum())
            inter = int(((seg == c) & (ref == c)).sum())
            want_dc = 100.0 if na + nb == 0 else float(Fraction(200 * inter, na + nb))
            mismatches += dice(seg, ref, c) != want_dc
            if nb:
                mismatches += avd(seg, ref, c) != float(Fraction(100 * abs(na - nb), nb))
            if na and nb:
                worst_hd = max(worst_hd, abs(hd95(seg, ref, c) - hd95_oracle(seg, ref, c)))
                checked += 1
    elapsed = time.perf_counter() - start
    ok = worst_hd <= 1e-9 and mismatches == 0 and checked > 0 and elapsed < 60
    record_criterion(
        4, ok, f"hd95 max |diff| {worst_hd:.1e} over {checked} pairs (<=1e-9), dice/avd mismatches {mismatches}, {elapsed:.1f}s"
    )
    assert ok


# criteria 5 and 9: MRN_2 overfit on 8 phantoms

OVERFIT_ITERATIONS = 1500


def _overfit_config():
    return TrainConfig.for_phase(
        "pretrain_mrn", iterations=OVERFIT_ITERATIONS, n_blocks=2, seed=0, augment=False, **DESK
    )


@pytest.fixture(scope="module")
def overfit():
    data = make_phantom_split(8, 0, 64, 64, seed=5).train
    start = time.perf_counter()
    ckpt = pretrain_mrn(data, _overfit_config())
    return data, ckpt, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_5_overfit(overfit, record_criterion):
    data, ckpt, elapsed = overfit
    zf = report(data, zero_filled_images(data, MASK)).psnr
    rec = report(data, reconstruct(ckpt.build(), data, MASK)).psnr
    gain = rec - zf
    ok = gain >= 3.0 and elapsed <= 15 * 60
    record_criterion(
        5, ok, f"train PSNR {rec:.2f} dB vs zero-filled {zf:.2f} dB, gain {gain:+.2f} dB (>=3), "
        f"{OVERFIT_ITERATIONS} iterations in {elapsed:.0f}s"
    )
    assert ok


@pytest.mark.slow
def test_criterion_9_persistence(overfit, tmp_path, record_criterion):
    from segnetmri.container import dumps, loads, read_container, write_container

    data, ckpt, _ = overfit
    rng = np.random.default_rng(9)
    entries = {
        "f32": rng.standard_normal((3, 5)).astype(np.float32),
        "c128": rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)),
        "u8": rng.integers(0, 256, 9).astype(np.uint8),
        "i32": rng.integers(-9, 9, (2, 2)).astype(np.int32),
    }
    write_container(tmp_path / "c.snmt", entries)
    back = read_container(tmp_path / "c.snmt")
    container_ok = all(back[k].tobytes() == v.tobytes() and back[k].dtype == v.dtype for k, v in entries.items())
    container_ok &= dumps(loads((tmp_path / "c.snmt").read_bytes())) == (tmp_path / "c.snmt").read_bytes()

    ckpt.save(tmp_path / "a.snmt")
    loaded = Checkpoint.load(tmp_path / "a.snmt")
    loaded.save(tmp_path / "b.snmt")
    ckpt_ok = (tmp_path / "a.snmt").read_bytes() == (tmp_path / "b.snmt").read_bytes()
    before = reconstruct(ckpt.build(), data, MASK)
    after = reconstruct(loaded.build(), data, MASK)
    ckpt_ok &= all(np.array_equal(a, b) for a, b in zip(before, after))

    rerun = pretrain_mrn(data, _overfit_config())
    first, second = ckpt.loss_log[-1]["loss"], rerun.loss_log[-1]["loss"]
    bit_equal = first == second
    rerun_ok = bit_equal and all(rerun.params[k].tobytes() == v.tobytes() for k, v in ckpt.params.items())
    ok = container_ok and ckpt_ok and rerun_ok
    record_criterion(
        9, ok, f"container round trip {container_ok}, checkpoint round trip {ckpt_ok}, "
        f"rerun final loss {first!r} vs {second!r} (bit-equal {bit_equal})"
    )
    assert ok


# criteria 6 and 7: joint fine-tuning on 24 train / 8 held-out phantoms

JOINT_SCHEDULE = dict(mrn=1000, msn=1000, finetune=2000, msn_patch=32)


def _joint_run(seed: int) -> dict:
    split = make_phantom_split(24, 8, 64, 64, seed=100 + seed)
    common = dict(n_blocks=2, seed=seed, augment=True, **DESK)
    mrn = pretrain_mrn(split.train, TrainConfig.for_phase("pretrain_mrn", iterations=JOINT_SCHEDULE["mrn"], **common))
    msn = pretrain_msn(
        split.train,
        TrainConfig.for_phase(
            "pretrain_msn", iterations=JOINT_SCHEDULE["msn"], patch_size=JOINT_SCHEDULE["msn_patch"], **common
        ),
    )
    joint = finetune_segnetmri(
        split.train, mrn, msn, TrainConfig.for_phase("finetune_joint", iterations=JOINT_SCHEDULE["finetune"], **common)
    )
    test = compare_methods(split.test, MASK, msn.build(), mrn.build(), joint.build())
    out = run_segnetmri(joint.build(), split.train, MASK)
    train_merged = report(split.train, None, out["merged"]).mean_dice()
    train_blocks = [report(split.train, None, [p[b] for p in out["per_block"]]).mean_dice() for b in range(2)]
    return {"test": test, "train_merged": train_merged, "train_blocks": train_blocks}


@pytest.fixture(scope="module")
def joint_runs():
    return {seed: _joint_run(seed) for seed in SEEDS}


@pytest.mark.slow
def test_criterion_6_joint_training(joint_runs, record_criterion):
    wins, psnr_ok, parts = 0, True, []
    for seed, run in joint_runs.items():
        seg, pipe = run["test"]["SegNetMRI2"], run["test"]["MRN2+MSN"]
        wins += seg.mean_dice() >= pipe.mean_dice()
        psnr_ok &= seg.psnr >= pipe.psnr - 0.3
        parts.append(
            f"seed {seed}: Dice {seg.mean_dice():.2f} vs {pipe.mean_dice():.2f}, PSNR {seg.psnr:.2f} vs {pipe.psnr:.2f}"
        )
    ok = wins >= 2 and psnr_ok
    record_criterion(6, ok, f"Dice wins {wins}/3 (>=2), PSNR within 0.3 dB {psnr_ok}; " + "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_7_ensemble_merge(joint_runs, record_criterion):
    ok, parts = True, []
    for seed, run in joint_runs.items():
        best = max(run["train_blocks"])
        ok &= run["train_merged"] >= best - 1.0
        blocks = "/".join(f"{d:.2f}" for d in run["train_blocks"])
        parts.append(f"seed {seed}: merged {run['train_merged']:.2f} vs blocks {blocks}")
    record_criterion(7, ok, "merged >= best block - 1.0 on the training set; " + "; ".join(parts))
    assert ok


# criterion 8: more blocks help at equal iterations

BLOCK_ITERATIONS = 1000


@pytest.mark.slow
def test_criterion_8_block_count(record_criterion):
    psnrs = {1: [], 3: []}
    for seed in SEEDS:
        split = make_phantom_split(24, 8, 64, 64, seed=100 + seed)
        for n in psnrs:
            cfg = TrainConfig.for_phase("pretrain_mrn", iterations=BLOCK_ITERATIONS, n_blocks=n, seed=seed, **DESK)
            ckpt = pretrain_mrn(split.train, cfg)
            psnrs[n].append(report(split.test, reconstruct(ckpt.build(), split.test, MASK)).psnr)
    mean1, mean3 = np.mean(psnrs[1]), np.mean(psnrs[3])
    ok = bool(mean3 >= mean1)
    per_seed = ", ".join(f"{a:.2f}/{b:.2f}" for a, b in zip(psnrs[1], psnrs[3]))
    record_criterion(
        8, ok, f"held-out PSNR N=3 {mean3:.2f} dB vs N=1 {mean1:.2f} dB over 3 seeds (per seed N1/N3: {per_seed})"
    )
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
