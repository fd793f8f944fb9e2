"""Acceptance criteria, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line to the terminal
(bypassing output capture) with the measured quantities.
"""

import contextlib
import csv
import json
import math
import random
import time

import numpy as np
import pytest
import torch
from scipy.interpolate import RBFInterpolator

from croptryon import data_io
from croptryon.crop import CropConfig, derive_rng, precrop_dataset, resize_nearest, sample_crop_window
from croptryon.evaluation import (HandcraftedExtractor, accumulate_fid_stats,
                                  build_fid_report, frechet_distance, run_unpaired_inference)
from croptryon.networks import NetConfig
from croptryon.tps import (SamplingGrid, bending_energy, canonical_grid, make_sampling_grid,
                           solve_tps, tps_transform, warp_image)
from croptryon.toy import make_toy_dataset
from croptryon.training import TrainConfig, TrainingData, train_stage

from test_crop import keypoint_heatmap_gap, nn_oracle
from test_evaluation import fid_oracle, random_images, random_spd, stats
from test_tps import (bending_quadrature, bilinear_oracle, dense_solve_oracle, random_problem,
                      warp_gradient_check)


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(number, title):
        facts = {}
        start = time.perf_counter()
        try:
            yield facts
        except BaseException as exc:
            facts["seconds"] = round(time.perf_counter() - start, 2)
            with capsys.disabled():
                print(f"\nACCEPTANCE {number} FAIL {title}: {facts} ({type(exc).__name__}: {exc})")
            raise
        facts["seconds"] = round(time.perf_counter() - start, 2)
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} PASS {title}: {facts}")
    return run


def reference_sampler(H, W, n, seed, scale=(0.5, 1.0), ratio=(3 / 4, 4 / 3), attempts=10):
    """Straightforward random-resized-crop sampler on Python's own RNG."""
    rnd = random.Random(seed)
    area = H * W
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    fracs = []
    for _ in range(n):
        for _ in range(attempts):
            target = area * rnd.uniform(*scale)
            r = math.exp(rnd.uniform(log_lo, log_hi))
            w = int(round(math.sqrt(target * r)))
            h = int(round(math.sqrt(target / r)))
            if 0 < w <= W and 0 < h <= H:
                fracs.append(h * w / area)
                break
        else:
            # centre-crop fallback; the source aspect lies inside the ratio range here
            fracs.append(1.0)
    return float(np.mean(fracs))


def test_1_crop_sampler_distribution(criterion):
    with criterion(1, "crop-sampler distribution") as f:
        H, W, n = 1024, 768, 100_000
        cfg = CropConfig()
        eps = 2 * (H + W) / (H * W)
        t0 = time.perf_counter()
        rng = derive_rng(2024)
        wins = [sample_crop_window(H, W, cfg, rng) for _ in range(n)]
        f["sampler_seconds"] = round(time.perf_counter() - t0, 2)
        tops = np.array([w.top for w in wins]); lefts = np.array([w.left for w in wins])
        hs = np.array([w.height for w in wins]); ws = np.array([w.width for w in wins])
        legal = bool((tops >= 0).all() and (lefts >= 0).all() and (hs > 0).all() and (ws > 0).all()
                     and (tops + hs <= H).all() and (lefts + ws <= W).all())
        fracs = hs * ws / (H * W)
        f["min_frac"], f["max_frac"] = round(float(fracs.min()), 5), round(float(fracs.max()), 5)
        f["mean"] = round(float(fracs.mean()), 5)
        f["oracle_mean"] = round(reference_sampler(H, W, n, seed=7), 5)
        f["fallbacks"] = int(sum(w.fallback for w in wins))
        assert legal
        assert fracs.min() >= 0.5 - eps and fracs.max() <= 1.0
        assert abs(f["mean"] - f["oracle_mean"]) <= 0.005
        assert f["sampler_seconds"] < 10


def test_2_fixed_scale_precrop(criterion, tmp_path):
    root = make_toy_dataset(tmp_path / "src", n_train=0, n_test=100, H=256, W=192, seed=11)
    with criterion(2, "fixed-scale precrop") as f:
        t0 = time.perf_counter()
        rep = precrop_dataset(root, tmp_path / "out", 0.7, seed=17, cfg=CropConfig(out_h=128, out_w=96))
        f["precrop_seconds"] = round(time.perf_counter() - t0, 2)
        manifest = json.loads(rep.manifest_path.read_text())
        fracs = [w["height"] * w["width"] / (w["src_h"] * w["src_w"]) for w in manifest]
        f["n"], f["min_frac"], f["max_frac"] = len(fracs), round(min(fracs), 5), round(max(fracs), 5)
        assert len(fracs) == 100
        assert all(0.695 <= x <= 0.705 for x in fracs)
        assert f["precrop_seconds"] < 5


def test_3_synchronisation(criterion):
    with criterion(3, "synchronisation") as f:
        rng = np.random.default_rng(3)
        H, W = 8, 6
        mismatches = 0
        for _ in range(1000):
            labels = rng.integers(0, 10, (H, W))
            win = sample_crop_window(H, W, CropConfig(scale_lo=0.2, scale_hi=1.0, out_h=8, out_w=6), rng)
            out_h, out_w = int(rng.integers(1, 17)), int(rng.integers(1, 13))
            mismatches += int((resize_nearest(labels, win, out_h, out_w) != nn_oracle(labels, win, out_h, out_w)).sum())
        f["nn_mismatches"] = mismatches
        f["heatmap_gap"] = round(max(keypoint_heatmap_gap(rng) for _ in range(100)), 5)
        assert mismatches == 0
        assert f["heatmap_gap"] <= 0.06


def test_4_tps_suite(criterion):
    with criterion(4, "TPS suite") as f:
        t0 = time.perf_counter()
        src = canonical_grid(3, 3)
        ident = solve_tps(src, src)
        f["identity_w"] = float(ident.weights.abs().max())
        assert f["identity_w"] <= 1e-10
        shift = solve_tps(src, src + torch.tensor([0.1, 0.0], dtype=torch.float64))
        assert float((shift.affine[:, 2] - torch.tensor([0.1, 0.0], dtype=torch.float64)).abs().max()) <= 1e-8

        s9, d9 = random_problem(0)
        p9 = solve_tps(s9, d9)
        f["interp_err"] = float(np.abs(tps_transform(p9, s9).numpy() - d9).max())
        w_ref, _ = dense_solve_oracle(s9, d9)
        f["dense_oracle_err"] = float(np.abs(p9.weights.numpy() - w_ref).max())
        assert f["interp_err"] <= 1e-8 and f["dense_oracle_err"] <= 1e-8

        A = np.array([[1.2, -0.3], [0.4, 0.9]])
        pa = solve_tps(s9, s9 @ A.T + [0.2, -0.1])
        f["affine_err"] = float(np.abs(pa.affine[:, :2].numpy() - A).max())
        f["affine_bend"] = abs(float(bending_energy(pa)))
        assert f["affine_err"] <= 1e-8 and f["affine_bend"] <= 1e-8

        H, W = 12, 10
        rng = np.random.default_rng(5)
        cells = rng.choice(H * W, 9, replace=False)
        rows, cols = cells // W, cells % W
        sp = np.column_stack([(2 * cols + 1) / W - 1, (2 * rows + 1) / H - 1])
        dp = sp + rng.normal(0, 0.1, sp.shape)
        grid = make_sampling_grid(solve_tps(sp, dp), H, W).coords.numpy()
        rbf = RBFInterpolator(sp, dp, kernel="thin_plate_spline", degree=1)
        f["grid_err"] = float(np.abs(grid[rows, cols] - rbf(sp)).max())
        assert f["grid_err"] <= 1e-6

        img = rng.random((5, 5))
        coords = rng.uniform(-1, 1, (7, 6, 2))
        out = warp_image(img, SamplingGrid(torch.from_numpy(coords)))
        ref = np.array([[bilinear_oracle(img, *coords[i, j]) for j in range(6)] for i in range(7)])
        f["bilinear_err"] = float(np.abs(out - ref).max())
        assert f["bilinear_err"] <= 1e-6

        g3 = canonical_grid(3, 3).numpy()
        pb = solve_tps(g3, g3 + np.random.default_rng(3).normal(0, 0.05, g3.shape))
        ratio = bending_quadrature(g3, pb.weights.numpy()) / (16 * np.pi * float(bending_energy(pb)))
        f["bend_quadrature_ratio"] = round(ratio, 5)
        assert abs(ratio - 1) < 0.05

        f["grad_max_rel_err"] = float(max(warp_gradient_check(n_probes=20)))
        assert f["grad_max_rel_err"] <= 1e-2

        res = [float(np.abs(tps_transform(solve_tps(s9, d9, r), s9).numpy() - d9).max())
               for r in (0.0, 1e-3, 1e-2, 1e-1, 1.0)]
        assert all(b >= a - 1e-12 for a, b in zip(res, res[1:]))
        assert time.perf_counter() - t0 < 30


def test_5_fid_suite(criterion):
    with criterion(5, "FID suite") as f:
        ext = HandcraftedExtractor()
        imgs = random_images(64, seed=2)
        whole = accumulate_fid_stats(imgs, ext)
        f["self_distance"] = frechet_distance(whole, whole)
        f["one_d"] = frechet_distance(stats([0], [[1]]), stats([1], [[1]]))
        rng = np.random.default_rng(0)
        mu1, mu2, c1, c2 = rng.normal(size=4), rng.normal(size=4), random_spd(4, rng), random_spd(4, rng)
        f["spd_err"] = abs(frechet_distance(stats(mu1, c1), stats(mu2, c2)) - fid_oracle(mu1, c1, mu2, c2))
        merged = accumulate_fid_stats(imgs[:30], ext).merge(accumulate_fid_stats(imgs[30:], ext))
        f["merge_err"] = float(max(np.abs(merged.mean - whole.mean).max(), np.abs(merged.cov - whole.cov).max()))
        assert f["self_distance"] <= 1e-6
        assert abs(f["one_d"] - 1.0) <= 1e-9
        assert f["spd_err"] <= 1e-6
        assert f["merge_err"] <= 1e-8


E2E_NET = NetConfig(image_size=(64, 48))
MODELS = {
    "crop": CropConfig(out_h=64, out_w=48),
    "no_crop": CropConfig(scale_lo=1.0, scale_hi=1.0, ratio_lo=0.75, ratio_hi=0.75, out_h=64, out_w=48),
}
SCALES = (1.0, 0.7, 0.5)


def losses(path):
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


class _Subset(TrainingData):
    def __init__(self, full, n):
        self.root, self.pairs = full.root, full.pairs
        self.samples, self.agnostic = full.samples[:n], full.agnostic[:n]


def test_6_end_to_end(criterion, tmp_path):
    with criterion(6, "end-to-end toy protocol") as f:
        t0 = time.perf_counter()
        root = make_toy_dataset(tmp_path / "toy", n_train=16, n_test=16, H=64, W=48, seed=0)
        data = TrainingData(root, TrainConfig().agnostic)
        all_finite = True
        for model, crop in MODELS.items():
            for stage in ("seg", "deform", "synth"):
                cfg = TrainConfig.for_stage(stage, net=E2E_NET, crop=crop, max_iters=200)
                res = train_stage(cfg, root, tmp_path / model, data=data)
                rows = losses(res.losses_csv)
                assert len(rows) == 200
                all_finite &= all(np.isfinite(v) for r in rows for v in r.values())
        f["all_losses_finite"] = all_finite
        assert all_finite

        # deform overfit on 4 records with the crop model's segmentation frozen
        cfg = TrainConfig.for_stage("deform", net=E2E_NET, crop=MODELS["crop"], max_iters=500)
        res = train_stage(cfg, root, tmp_path / "overfit", ckpt_dir=tmp_path / "crop", data=_Subset(data, 4))
        l1 = [r["l1"] for r in losses(res.losses_csv)]
        f["overfit_l1_first"], f["overfit_l1_min"] = round(l1[0], 5), round(min(l1), 5)
        f["overfit_drop"] = round(1 - min(l1) / l1[0], 4)
        assert f["overfit_drop"] >= 0.5

        real, fake = {}, {}
        for scale in SCALES:
            pc = tmp_path / f"test_{scale}"
            precrop_dataset(root, pc, scale, seed=17, cfg=MODELS["crop"])
            real[scale] = pc / "test" / "image"
            for model in MODELS:
                out = tmp_path / f"fake_{model}_{scale}"
                manifest = run_unpaired_inference(tmp_path / model, pc, out, E2E_NET)
                assert len(manifest["pairs"]) == 16
                for p in manifest["pairs"]:
                    assert data_io.read_rgb(out / p["file"]).shape == (64, 48, 3)
                fake[(model, scale)] = out
        rows = build_fid_report(real, fake, HandcraftedExtractor(), tmp_path / "report")
        f["report"] = {f"{r['model']}@{r['scale']}": round(r["fid"], 4) for r in rows}
        assert [(r["model"], r["scale"]) for r in rows] == sorted((m, s) for m in MODELS for s in SCALES)
        assert all(np.isfinite(r["fid"]) and r["n_real"] == r["n_fake"] == 16 for r in rows)
        for name in ("fid_report.csv", "fid_chart.csv", "fid_chart.png"):
            assert (tmp_path / "report" / name).is_file()
        assert time.perf_counter() - t0 < 900


def test_7_determinism(criterion, tmp_path):
    with criterion(7, "determinism") as f:
        root = make_toy_dataset(tmp_path / "toy", n_train=8, n_test=8, H=64, W=48, seed=1)
        net = NetConfig(base_channels=8, image_size=(64, 48))
        crop = CropConfig(out_h=64, out_w=48)
        artefacts = []
        for run in ("a", "b"):
            d = tmp_path / run
            precrop_dataset(root, d / "pc", 0.7, seed=5, cfg=crop)
            for stage in ("seg", "deform", "synth"):
                train_stage(TrainConfig.for_stage(stage, net=net, crop=crop, max_iters=10, seed=3), root, d / "ck")
            run_unpaired_inference(d / "ck", d / "pc", d / "fake", net)
            files = [d / "pc" / "manifest.json"] + sorted((d / "ck").glob("*_losses.csv")) \
                + sorted((d / "fake").glob("*.png"))
            artefacts.append({p.relative_to(d): p.read_bytes() for p in files})
        f["files_compared"] = len(artefacts[0])
        assert artefacts[0].keys() == artefacts[1].keys()
        diffs = [str(k) for k in artefacts[0] if artefacts[0][k] != artefacts[1][k]]
        f["differing"] = diffs
        assert not diffs and f["files_compared"] == 1 + 3 + 8
