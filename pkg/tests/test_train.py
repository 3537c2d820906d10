import json

import numpy as np
import pytest
import torch

from spar import nets
from spar.data import CohortSpec, Volume, generate_cohort
from spar.nets import NetConfig
from spar.objectives import MethodKind
from spar.train import (TrainConfig, TrainingDiverged, derive_seed, foreground_dice, predict_volume,
                        pretrain_autoencoder, run_training, train_segmenter)

NET = NetConfig(input_size=16, classes=4, unet_levels=2, base_channels=4, ae_channels=(4, 8, 512),
                mask_disc_channels=(4, 8))


@pytest.fixture(scope="module")
def cases():
    return generate_cohort(CohortSpec(n_patients=2, slice_size=16, depth=6, seed=11))


def _state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_config_defaults_and_validation():
    tc = TrainConfig()
    assert (tc.lam, tc.ae_lr, tc.seg_lr, tc.epochs, tc.batch_size) == (1e-2, 1e-2, 1e-4, 10, 32)
    assert tc.betas == (0.9, 0.999) and tc.adam_eps == 1e-8
    for bad in (dict(seg_lr=0.0), dict(epochs=-1), dict(batch_size=1), dict(lam=-0.1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(method="adv-mask").method is MethodKind.ADV_MASK


def test_seed_streams_differ():
    assert len({derive_seed(0, s) for s in range(5)}) == 5
    assert derive_seed(3, 1) == derive_seed(3, 1) != derive_seed(4, 1)


def test_zero_epoch_pretraining_is_a_no_op(cases):
    F, G, logs = pretrain_autoencoder(cases, NET, TrainConfig(epochs=0, batch_size=4))
    assert logs == []
    ref_f = nets.build("F", NET, derive_seed(0, 1))
    assert _same(_state(F), _state(ref_f))


def test_pretraining_is_deterministic(cases):
    tc = TrainConfig(epochs=2, batch_size=4, seed=3)
    F1, G1, logs1 = pretrain_autoencoder(cases, NET, tc)
    F2, G2, logs2 = pretrain_autoencoder(cases, NET, tc)
    assert _same(_state(F1), _state(F2)) and _same(_state(G1), _state(G2))
    assert [a.loss for a in logs1] == [b.loss for b in logs2]
    assert len(logs1) == 2 and all(0.0 <= a.recon_dice <= 1.0 for a in logs1)


def test_foreground_dice_pooled():
    gt = np.array([[[1, 1, 2, 0]]])
    pred = np.array([[[1, 0, 2, 2]]])
    assert foreground_dice(pred, gt, 4) == [2 / 3, 2 / 3, 1.0]


def test_encoder_is_frozen_during_segmenter_training(cases):
    F = nets.build("F", NET, 1)
    before = _state(F)
    res = train_segmenter(cases, "spar", NET, TrainConfig(epochs=1, batch_size=4), encoder=F)
    assert _same(before, _state(F))
    assert res.discriminator is not None and len(res.logs) == 1


def test_baseline_equals_unregularised_spar_without_discriminator_updates(cases):
    tc = TrainConfig(epochs=2, batch_size=4, seed=5, lam=0.0)
    base = train_segmenter(cases, "baseline", NET, tc)
    spar = train_segmenter(cases, "spar", NET, tc, encoder=nets.build("F", NET, 2), update_discriminator=False)
    assert [r["ce"] for r in base.batch_rows] == [r["ce"] for r in spar.batch_rows]
    assert _same(_state(base.segmenter), _state(spar.segmenter))


def test_baseline_ignores_lambda(cases):
    a = train_segmenter(cases, "baseline", NET, TrainConfig(epochs=1, batch_size=4, lam=0.0))
    b = train_segmenter(cases, "baseline", NET, TrainConfig(epochs=1, batch_size=4, lam=5.0))
    assert _same(_state(a.segmenter), _state(b.segmenter))


def test_discriminator_step_does_not_touch_segmenter(cases):
    # with a zero segmenter learning rate only the discriminator can move
    tc = TrainConfig(epochs=1, batch_size=4, seg_lr=1e-30, disc_lr=1e-2)
    s0 = nets.build("S", NET, derive_seed(0, 0))
    res = train_segmenter(cases, "adv-mask", NET, tc)
    for (n, p0), p1 in zip(s0.named_parameters(), res.segmenter.parameters()):
        assert torch.allclose(p0, p1, atol=1e-20), n
    d0 = nets.build("M", NET, derive_seed(0, 2))
    assert any(not torch.equal(a, b) for a, b in zip(d0.parameters(), res.discriminator.parameters()))


def test_methods_requiring_encoder_reject_missing_encoder(cases):
    for m in ("spar", "shape-l2"):
        with pytest.raises(ValueError):
            train_segmenter(cases, m, NET, TrainConfig(epochs=1, batch_size=4))


def test_divergence_is_reported(cases):
    with pytest.raises(TrainingDiverged):
        train_segmenter(cases, "baseline", NET, TrainConfig(epochs=3, batch_size=4, seg_lr=1e30))


def test_every_method_logs_finite_losses(cases):
    F = nets.build("F", NET, 1)
    for m in MethodKind:
        res = train_segmenter(cases, m, NET, TrainConfig(epochs=1, batch_size=4), encoder=F)
        log = res.logs[0]
        assert np.isfinite([log.ce, log.reg, log.total]).all()
        assert (log.disc_loss is not None) == m.adversarial
        if m is MethodKind.BASELINE:
            assert log.reg == 0.0


def test_predict_volume_shape_and_tie_rule(cases):
    S = nets.build("S", NET, 0)
    with torch.no_grad():
        S.head.weight.zero_()
        S.head.bias.zero_()
    pred = predict_volume(S, cases[0].image)
    assert pred.data.shape == cases[0].image.data.shape and pred.spacing_mm == cases[0].image.spacing_mm
    assert not pred.data.any()
    with pytest.raises(ValueError):
        predict_volume(S, Volume(np.zeros((2, 32, 32), np.float32)))


def test_run_directory_contents(cases, tmp_path):
    base = run_training(cases, NET, TrainConfig(method="baseline", epochs=2, batch_size=4), tmp_path / "b")
    assert "D" not in base.manifest["checkpoints"] and "F" not in base.manifest["checkpoints"]
    spar = run_training(cases, NET, TrainConfig(method="spar", epochs=2, batch_size=4), tmp_path / "s")
    ck = spar.manifest["checkpoints"]
    assert set(ck["S"]) == set(ck["D"]) == {"1", "2"} and "F" in ck
    for rel in [ck["F"], ck["G"], *ck["S"].values(), *ck["D"].values()]:
        assert (tmp_path / "s" / rel).exists()
    manifest = json.loads((tmp_path / "s" / "run_manifest.json").read_text())
    assert manifest["train_config"]["method"] == "spar" and manifest["final_epoch"] == 2
    header = (tmp_path / "s" / "loss.csv").read_text().splitlines()[0]
    assert header == "epoch,step,method,ce,reg,total,disc_loss"
    F = nets.load_params(tmp_path / "s" / ck["F"], expect_role="F")
    for a, b in zip(F.state_dict().values(), spar.encoder.state_dict().values()):
        assert torch.equal(a, b)


def test_zero_epoch_run_still_checkpoints(cases, tmp_path):
    run = run_training(cases, NET, TrainConfig(method="spar", epochs=0, batch_size=4), tmp_path)
    assert run.manifest["checkpoints"]["S"] == {"0": "checkpoints/S_epoch00.params"}
    assert run.logs == []


def test_identical_runs_write_identical_csvs(cases, tmp_path):
    tc = TrainConfig(method="spar", epochs=2, batch_size=4, seed=9)
    run_training(cases, NET, tc, tmp_path / "a")
    run_training(cases, NET, tc, tmp_path / "b")
    for name in ("loss.csv", "epochs.csv", "ae_loss.csv", "ae_epochs.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
