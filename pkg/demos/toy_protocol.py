"""
The whole protocol on a toy dataset
====================================

Trains a crop-augmented model and a baseline for a few iterations, pre-crops
the test split at three scales, runs unpaired inference and writes the
FID-vs-scale report. Pass an iteration count to train longer.
"""

import sys
from pathlib import Path

from croptryon.crop import CropConfig, precrop_dataset
from croptryon.evaluation import HandcraftedExtractor, build_fid_report, run_unpaired_inference
from croptryon.networks import NetConfig
from croptryon.toy import make_toy_dataset
from croptryon.training import TrainConfig, TrainingData, train_stage

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 30
out = Path("demo_out") / "protocol"
root = make_toy_dataset(out / "toy", n_train=16, n_test=16, H=64, W=48, seed=0)

net = NetConfig(image_size=(64, 48))
models = {
    "crop": CropConfig(out_h=64, out_w=48),
    "no_crop": CropConfig(scale_lo=1.0, scale_hi=1.0, ratio_lo=0.75, ratio_hi=0.75, out_h=64, out_w=48),
}

# records and agnostic maps are loaded once and shared by every run
data = TrainingData(root, TrainConfig().agnostic)
for name, crop in models.items():
    for stage in ("seg", "deform", "synth"):
        res = train_stage(TrainConfig.for_stage(stage, net=net, crop=crop, max_iters=iters),
                          root, out / name, data=data)
        print(f"{name}/{stage}: last total loss {res.rows[-1]['total']:.4f}")

real, fake = {}, {}
for scale in (1.0, 0.7, 0.5):
    test_root = out / f"test_{scale}"
    precrop_dataset(root, test_root, scale, seed=17, cfg=models["crop"], force=True)
    real[scale] = test_root / "test" / "image"
    for name in models:
        fake[(name, scale)] = out / f"fake_{name}_{scale}"
        run_unpaired_inference(out / name, test_root, fake[(name, scale)], net)

rows = build_fid_report(real, fake, HandcraftedExtractor(), out / "report")
for r in rows:
    print(f"{r['model']:8s} scale={r['scale']:.1f}  FID={r['fid']:.4f}")
print("chart:", out / "report" / "fid_chart.png")
