import math

import numpy as np
import pytest
import torch

from segnetmri.container import MANIFEST_KEY, read_container
from segnetmri.errors import ConfigurationError, ParameterError, TrainingDivergedError
from segnetmri.losses import LossValue
from segnetmri.networks import SegNetMRI
from segnetmri.phantom import make_phantom_split
from segnetmri.training import (
    Checkpoint,
    TrainConfig,
    _Trainer,
    finetune_recon_only,
    finetune_segnetmri,
    pretrain_mrn,
    pretrain_msn,
)

TINY = dict(depth=2, base_channels=4, n_blocks=2, seed=3)


@pytest.fixture(scope="module")
def data():
    return make_phantom_split(4, 2, 32, 32, seed=11).train


@pytest.fixture(scope="module")
def mrn_ckpt(data):
    return pretrain_mrn(data, TrainConfig.for_phase("pretrain_mrn", iterations=4, **TINY))


@pytest.fixture(scope="module")
def msn_ckpt(data):
    return pretrain_msn(data, TrainConfig.for_phase("pretrain_msn", iterations=4, batch_size=4, patch_size=16, **TINY))


def test_defaults_follow_protocol():
    mrn = TrainConfig.for_phase("pretrain_mrn")
    msn = TrainConfig.for_phase("pretrain_msn")
    ft = TrainConfig.for_phase("finetune_joint")
    assert (mrn.iterations, mrn.batch_size, mrn.patch_size) == (30000, 4, None)
    assert (msn.iterations, msn.batch_size, msn.patch_size) == (60000, 16, 64)
    assert (ft.iterations, ft.batch_size) == (8000, 4)
    assert (ft.learning_rate, ft.beta1, ft.beta2, ft.lam) == (5e-4, 0.9, 0.999, 0.01)


def test_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig.for_phase("bogus")
    with pytest.raises(ParameterError):
        TrainConfig.for_phase("finetune_joint", lam=-1.0)
    with pytest.raises(ConfigurationError):
        pretrain_mrn([], TrainConfig.for_phase("pretrain_msn", iterations=1))


def test_empty_dataset(data):
    with pytest.raises(ParameterError):
        pretrain_mrn([], TrainConfig.for_phase("pretrain_mrn", iterations=1, **TINY))


def test_checkpoint_round_trip_bit_exact(tmp_path, mrn_ckpt, msn_ckpt, data):
    seg = finetune_segnetmri(data, mrn_ckpt, msn_ckpt, TrainConfig.for_phase("finetune_joint", iterations=2, **TINY))
    for ck in (mrn_ckpt, msn_ckpt, seg):
        a, b = tmp_path / "a.snmt", tmp_path / "b.snmt"
        ck.save(a)
        loaded = Checkpoint.load(a)
        loaded.save(b)
        assert a.read_bytes() == b.read_bytes()
        for k, v in ck.params.items():
            assert loaded.params[k].dtype == v.dtype
            assert loaded.params[k].tobytes() == v.tobytes()
        assert loaded.config == ck.config and loaded.iteration == ck.iteration


def test_checkpoint_preserves_outputs(tmp_path, mrn_ckpt, data):
    from segnetmri.evaluation import reconstruct
    from segnetmri.kspace import make_cartesian_mask

    mask = make_cartesian_mask(32, 32, 0.2, 0.08, 0)
    mrn_ckpt.save(tmp_path / "m.snmt")
    before = reconstruct(mrn_ckpt.build(), data, mask)
    after = reconstruct(Checkpoint.load(tmp_path / "m.snmt").build(), data, mask)
    assert all(np.array_equal(x, y) for x, y in zip(before, after))


def test_manifest_records_architecture(tmp_path, mrn_ckpt):
    mrn_ckpt.save(tmp_path / "m.snmt")
    entries = read_container(tmp_path / "m.snmt")
    assert MANIFEST_KEY in entries
    assert mrn_ckpt.model["n_blocks"] == 2 and mrn_ckpt.model["depth"] == 2


def test_build_rejects_tampered_params(mrn_ckpt):
    params = dict(mrn_ckpt.params)
    params.pop(next(iter(params)))
    bad = Checkpoint(mrn_ckpt.kind, params, mrn_ckpt.config, 0, mrn_ckpt.model)
    with pytest.raises(ConfigurationError):
        bad.build()
    wrong = dict(mrn_ckpt.model, base_channels=8)
    with pytest.raises(ConfigurationError):
        Checkpoint(mrn_ckpt.kind, mrn_ckpt.params, mrn_ckpt.config, 0, wrong).build()


def test_fixed_seed_is_bit_reproducible(data):
    torch.set_num_threads(1)
    cfg = TrainConfig.for_phase("pretrain_mrn", iterations=5, **TINY)
    a, b = pretrain_mrn(data, cfg), pretrain_mrn(data, cfg)
    assert [r["loss"] for r in a.loss_log] == [r["loss"] for r in b.loss_log]
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_msn_learns_on_tiny_set(data):
    cfg = TrainConfig.for_phase("pretrain_msn", iterations=60, batch_size=4, patch_size=16, augment=False, **TINY)
    log = pretrain_msn(data, cfg).loss_log
    per_pixel = np.mean([r["per_pixel"] for r in log[-10:]])
    assert per_pixel < math.log(4)


def test_architecture_mismatch(data, mrn_ckpt):
    other = pretrain_msn(
        data, TrainConfig.for_phase("pretrain_msn", iterations=1, batch_size=2, patch_size=16, depth=2, base_channels=8)
    )
    cfg = TrainConfig.for_phase("finetune_joint", iterations=1, **TINY)
    with pytest.raises(ConfigurationError):
        finetune_segnetmri(data, mrn_ckpt, other, cfg)
    with pytest.raises(ConfigurationError):
        finetune_segnetmri(data, other, mrn_ckpt, cfg)


def test_finetune_log_and_merge_init(data, mrn_ckpt, msn_ckpt):
    seg = finetune_segnetmri(data, mrn_ckpt, msn_ckpt, TrainConfig.for_phase("finetune_joint", iterations=3, **TINY))
    assert seg.kind == "segnetmri" and len(seg.loss_log) == 3
    row = seg.loss_log[0]
    assert row["loss"] == pytest.approx(row["mrn"] + 0.01 * row["omsn"], rel=1e-6)
    model = seg.build()
    assert isinstance(model, SegNetMRI) and model.n_blocks == 2


def test_segmentation_alone_drives_first_encoder(data, mrn_ckpt, msn_ckpt):
    # backprop the ensemble segmentation term alone
    from segnetmri.evaluation import _measure
    from segnetmri.kspace import make_cartesian_mask
    from segnetmri.losses import segnetmri_loss

    model = SegNetMRI.from_pretrained(mrn_ckpt.build(), msn_ckpt.build())
    model.train()
    y = _measure(data, make_cartesian_mask(32, 32, 0.2, 0.08, 0))
    labels = torch.from_numpy(np.stack([s.labels for s in data]).astype(np.int64))
    out = model(y)
    loss = segnetmri_loss(out, torch.zeros_like(out.reconstruction), labels, lam=1.0)
    loss.components["omsn"].backward()
    grad = sum(p.grad.norm() for p in model.mrn.blocks[0].encoder.parameters())
    assert grad > 0


def test_recon_only_freezes_segmentation(data, mrn_ckpt, msn_ckpt):
    before = {k: v.copy() for k, v in msn_ckpt.params.items()}
    out = finetune_recon_only(
        data, mrn_ckpt, msn_ckpt, TrainConfig.for_phase("finetune_recon_only", iterations=3, **TINY)
    )
    assert out.kind == "mrn"
    assert all(before[k].tobytes() == v.tobytes() for k, v in msn_ckpt.params.items())
    assert any(out.params[k].tobytes() != v.tobytes() for k, v in mrn_ckpt.params.items())


def test_recon_only_lambda_zero_is_mrn_loss(data, mrn_ckpt, msn_ckpt):
    out = finetune_recon_only(
        data, mrn_ckpt, msn_ckpt, TrainConfig.for_phase("finetune_recon_only", iterations=3, lam=0.0, **TINY)
    )
    assert all(r["loss"] == r["mrn"] for r in out.loss_log)


def _dummy_trainer(data, **kw):
    net = torch.nn.Linear(1, 1)
    cfg = TrainConfig.for_phase("pretrain_mrn", iterations=10, **kw)
    return _Trainer(data, cfg, "mrn", net, net.parameters()), net


def test_divergence_aborts(data):
    trainer, net = _dummy_trainer(data)
    bad = LossValue(net.weight.sum() * float("nan"), {})
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        trainer.step(1, bad)


def test_monotone_check(data):
    trainer, net = _dummy_trainer(data, monotone_window=2)
    for it, scale in enumerate([1.0, 1.0, 0.5, 0.5, 0.4, 0.4], 1):
        trainer.step(it, LossValue(net.weight.sum() * 0 + scale, {}))
    with pytest.raises(TrainingDivergedError, match="rose"):
        for it, scale in enumerate([0.9, 0.9], 7):
            trainer.step(it, LossValue(net.weight.sum() * 0 + scale, {}))


def test_periodic_checkpoints_and_loss_csv(tmp_path, data):
    cfg = TrainConfig.for_phase("pretrain_mrn", iterations=4, checkpoint_every=2, out_dir=str(tmp_path), **TINY)
    pretrain_mrn(data, cfg)
    saved = sorted(p.name for p in tmp_path.glob("mrn_*.snmt"))
    assert saved == ["mrn_pretrain_mrn_000002.snmt", "mrn_pretrain_mrn_000004.snmt"]
    lines = (tmp_path / "pretrain_mrn_loss.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,loss") and len(lines) == 5


def test_residual_head_init_option(data):
    with pytest.raises(ParameterError):
        TrainConfig.for_phase("pretrain_mrn", residual_head_init="ones")
    zero = pretrain_mrn(data, TrainConfig.for_phase("pretrain_mrn", iterations=1, **TINY))
    rand = pretrain_mrn(data, TrainConfig.for_phase("pretrain_mrn", iterations=1, residual_head_init="xavier", **TINY))
    # same batch, so the only difference in the first loss is the head
    assert zero.loss_log[0]["loss"] < rand.loss_log[0]["loss"]
