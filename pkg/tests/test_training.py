import csv

import numpy as np
import pytest
import torch

from croptryon import training
from croptryon.crop import CropConfig, resize_nearest
from croptryon.errors import ConfigError, ContractError, DependencyError, NonFiniteLossError
from croptryon.networks import NetConfig
from croptryon.tps import canonical_grid, solve_tps
from croptryon.training import (CSV_COLUMNS, TrainConfig, TrainingData, bce_gan_losses, hinge_gan_losses,
                                make_batch, sample_window, stage_loss, train_stage)

NET = NetConfig(base_channels=8, image_size=(64, 48))
CROP = CropConfig(out_h=64, out_w=48)
NO_CROP = CropConfig(scale_lo=1.0, scale_hi=1.0, ratio_lo=0.75, ratio_hi=0.75, out_h=64, out_w=48)


def cfg_for(stage, **kw):
    kw.setdefault("crop", CROP)
    return TrainConfig.for_stage(stage, net=NET, seed=kw.pop("seed", 0), **kw)


@pytest.fixture(scope="module")
def data(toy_root):
    return TrainingData(toy_root, cfg_for("seg").agnostic)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestGanLosses:
    def test_saturated(self):
        d, _ = hinge_gan_losses(torch.full((2, 1, 4, 4), 2.0), torch.full((2, 1, 4, 4), -2.0))
        assert float(d) == 0.0

    def test_zero_logits(self):
        d, g = hinge_gan_losses(torch.zeros(3, 1, 2, 2), torch.zeros(3, 1, 2, 2))
        assert float(d) == 2.0 and float(g) == 0.0

    def test_scalar_oracle_multiscale(self):
        rng = np.random.default_rng(0)
        real = [rng.normal(size=(2, 1, 4, 3)), rng.normal(size=(2, 1, 2, 2))]
        fake = [rng.normal(size=(2, 1, 4, 3)), rng.normal(size=(2, 1, 2, 2))]
        d_ref = g_ref = 0.0
        for r, f in zip(real, fake):
            d_ref += (sum(max(0.0, 1 - v) for v in r.ravel()) / r.size
                      + sum(max(0.0, 1 + v) for v in f.ravel()) / f.size)
            g_ref += -sum(f.ravel()) / f.size
        d, g = hinge_gan_losses([torch.tensor(r) for r in real], [torch.tensor(f) for f in fake])
        assert abs(float(d) - d_ref / 2) <= 1e-6
        assert abs(float(g) - g_ref / 2) <= 1e-6

    def test_bce_closed_form(self):
        d, g = bce_gan_losses(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2))
        assert abs(float(d) - 2 * np.log(2)) <= 1e-6
        assert abs(float(g) - np.log(2)) <= 1e-6


class TestStageLoss:
    @pytest.fixture(scope="class")
    @staticmethod
    def batch(data):
        cfg = cfg_for("seg")
        return make_batch([data.bundle(i, sample_window(data, i, 0, cfg), CROP, 3.0) for i in range(2)], NET)

    def test_constant_offset(self, batch):
        cfg = cfg_for("synth", l1_weight=2.5)
        out = {"stage": "synth", "tryon": batch["person"] + 0.1, "fake_logits": [torch.zeros(2, 1, 8, 6)]}
        total, parts = stage_loss("synth", batch, out, cfg)
        assert abs(parts["l1"] - 0.25) <= 1e-6
        assert parts["adv"] == 0.0

    def test_perfect_deform(self, batch):
        src = canonical_grid(5, 5).expand(2, -1, -1)
        out = {"stage": "deform", "warped_cloth": batch["person"], "warped_mask": batch["garment_mask"],
               "tps_params": solve_tps(src, src)}
        total, parts = stage_loss("deform", batch, out, cfg_for("deform"))
        assert parts["l1"] == 0.0 and abs(parts["bend"]) <= 1e-10

    def test_saturated_ce(self, batch):
        logits = 50.0 * torch.nn.functional.one_hot(batch["parse"], NET.num_labels).permute(0, 3, 1, 2).float()
        out = {"stage": "seg", "seg_logits": logits, "fake_logits": [torch.zeros(2, 1, 8, 6)]}
        _, parts = stage_loss("seg", batch, out, cfg_for("seg"))
        assert parts["ce"] < 1e-12

    @pytest.mark.parametrize("stage", training.STAGES)
    def test_recomposition(self, batch, stage):
        g = torch.Generator().manual_seed(1)
        src = canonical_grid(5, 5).double().expand(2, -1, -1)
        out = {"stage": stage,
               "seg_logits": torch.randn(2, NET.num_labels, 64, 48, generator=g),
               "fake_logits": [torch.randn(2, 1, 8, 6, generator=g), torch.randn(2, 1, 4, 3, generator=g)],
               "warped_cloth": torch.rand(2, 3, 64, 48, generator=g),
               "warped_mask": torch.rand(2, 1, 64, 48, generator=g),
               "tps_params": solve_tps(src, src + 0.05 * torch.randn(2, 25, 2, generator=g, dtype=torch.float64)),
               "tryon": torch.rand(2, 3, 64, 48, generator=g)}
        total, parts = stage_loss(stage, batch, out, cfg_for(stage))
        assert abs(float(total) - sum(parts.values())) <= 1e-6
        assert set(parts) == {"ce", "l1", "adv", "bend"}

    def test_contract_errors(self, batch):
        with pytest.raises(ContractError):
            stage_loss("seg", batch, {"stage": "synth", "tryon": batch["person"]}, cfg_for("seg"))
        with pytest.raises(ContractError, match="lack"):
            stage_loss("synth", batch, {"stage": "synth"}, cfg_for("synth"))


def test_config_validation():
    with pytest.raises(ConfigError, match="positive"):
        TrainConfig.for_stage("deform", net=NET, crop=CROP, bend_weight=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.for_stage("seg", net=NET, crop=CROP, adv_weight=-1.0)
    with pytest.raises(ConfigError, match="differs"):
        TrainConfig.for_stage("seg", net=NET)
    with pytest.raises(ConfigError):
        TrainConfig.for_stage("paint", net=NET, crop=CROP)
    with pytest.raises(ConfigError, match="perceptual"):
        TrainConfig.for_stage("synth", net=NET, crop=CROP, perceptual=True)


def test_batch_modalities_share_one_window(data):
    cfg = cfg_for("seg")
    idx = [3, 5]
    windows = [sample_window(data, i, 2, cfg) for i in idx]
    batch = make_batch([data.bundle(i, w, CROP, 3.0) for i, w in zip(idx, windows)], NET)
    assert batch["windows"] == windows
    for k, (i, w) in enumerate(zip(idx, windows)):
        parse_ref = resize_nearest(data.samples[i].parse.labels, w, 64, 48)
        ag_ref = resize_nearest(data.agnostic[i][1].labels, w, 64, 48)
        assert np.array_equal(batch["parse"][k].numpy(), parse_ref)
        assert np.array_equal(batch["agnostic_parse"][k].argmax(0).numpy(), ag_ref)


def test_window_streams(data):
    shared = [sample_window(data, 0, 0, cfg_for(s)) for s in training.STAGES]
    assert shared[0] == shared[1] == shared[2]
    per = [sample_window(data, 0, 0, cfg_for(s, crop=CropConfig(out_h=64, out_w=48, per_stage=True)))
           for s in training.STAGES]
    assert len({(w.top, w.left, w.height, w.width) for w in per}) > 1
    assert sample_window(data, 0, 0, cfg_for("seg")) != sample_window(data, 0, 1, cfg_for("seg"))


def test_seg_smoke(tmp_path, toy_root, data):
    res = train_stage(cfg_for("seg", max_iters=50), toy_root, tmp_path, data=data)
    rows = read_csv(res.losses_csv)
    assert list(rows[0]) == list(CSV_COLUMNS)
    assert len(rows) == 50
    for r in rows:
        vals = {k: float(r[k]) for k in CSV_COLUMNS[1:]}
        assert all(np.isfinite(v) for v in vals.values())
        assert abs(vals["total"] - (vals["ce"] + vals["l1"] + vals["adv"] + vals["bend"])) <= 1e-6
        assert 0.5 - 0.01 <= vals["window_area_frac"] <= 1.0
    assert res.checkpoint.is_file()


def test_determinism_and_crop_is_live(tmp_path, toy_root, data):
    a = train_stage(cfg_for("seg", max_iters=6), toy_root, tmp_path / "a", data=data)
    b = train_stage(cfg_for("seg", max_iters=6), toy_root, tmp_path / "b", data=data)
    c = train_stage(cfg_for("seg", max_iters=6, crop=NO_CROP), toy_root, tmp_path / "c", data=data)
    assert a.losses_csv.read_bytes() == b.losses_csv.read_bytes()
    assert a.losses_csv.read_bytes() != c.losses_csv.read_bytes()
    assert all(float(r["window_area_frac"]) == 1.0 for r in read_csv(c.losses_csv))


def test_prerequisites(tmp_path, toy_root, data):
    with pytest.raises(DependencyError, match="seg"):
        train_stage(cfg_for("deform", max_iters=1), toy_root, tmp_path, data=data)
    train_stage(cfg_for("seg", max_iters=1), toy_root, tmp_path, data=data)
    with pytest.raises(DependencyError, match="deform"):
        train_stage(cfg_for("synth", max_iters=1), toy_root, tmp_path, data=data)
    train_stage(cfg_for("deform", max_iters=2), toy_root, tmp_path, data=data)
    res = train_stage(cfg_for("synth", max_iters=2), toy_root, tmp_path, data=data)
    assert len(res.rows) == 2


def test_non_finite_loss_aborts_with_dump(tmp_path, toy_root, data, monkeypatch):
    real = training.stage_loss

    def poisoned(stage, batch, outputs, cfg):
        total, parts = real(stage, batch, outputs, cfg)
        return total * float("nan"), {**parts, "ce": float("nan")}

    monkeypatch.setattr(training, "stage_loss", poisoned)
    with pytest.raises(NonFiniteLossError) as info:
        train_stage(cfg_for("seg", max_iters=3), toy_root, tmp_path, data=data)
    diag = info.value.diagnostic
    assert diag["iter"] == 1 and len(diag["ids"]) == 4 and len(diag["windows"]) == 4
    assert (tmp_path / "seg_nonfinite_batch.json").is_file()
    assert not (tmp_path / "seg.pt").exists()
