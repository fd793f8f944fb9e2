"""
Random-resized-crop windows and lockstep cropping
==================================================

Draws crop windows the way training does, then crops every modality of a
toy record with one window and writes a contact sheet.
"""

from pathlib import Path

import numpy as np

from croptryon import data_io
from croptryon.agnostic import AgnosticConfig, build_agnostic
from croptryon.crop import CropConfig, crop_sample, derive_rng, sample_crop_window
from croptryon.toy import make_toy_sample

out = Path("demo_out")
out.mkdir(exist_ok=True)

# windows on a full-resolution source; area fractions land in [0.5, 1]
cfg = CropConfig()
rng = derive_rng(0)
wins = [sample_crop_window(1024, 768, cfg, rng) for _ in range(10000)]
fracs = np.array([w.area_fraction for w in wins])
print(f"area fraction: mean {fracs.mean():.4f}, min {fracs.min():.4f}, max {fracs.max():.4f}")
print("fallback windows:", sum(w.fallback for w in wins))

# a fixed scale collapses the range to a single value
fixed = cfg.at_scale(0.7)
print("scale 0.7 ->", sample_crop_window(1024, 768, fixed, derive_rng(1)).to_dict())

# one toy record, cropped with a single window
sample = make_toy_sample("00001", 256, 192, rng=0)
small = CropConfig(out_h=128, out_w=96)
win = sample_crop_window(256, 192, small.at_scale(0.5), derive_rng(2))
bundle = crop_sample(sample, build_agnostic(sample, AgnosticConfig()), win, small, sigma=3.0)
print("window", win.to_dict())

# person | agnostic | parse (as grey levels) | pose heatmaps
parse_grey = np.repeat(bundle.parse.labels[..., None] / 9.0, 3, axis=2)
pose = np.repeat(bundle.pose_map.max(0)[..., None], 3, axis=2)
sheet = np.concatenate([bundle.person_image, bundle.agnostic_image, parse_grey, pose], axis=1)
data_io.write_rgb(out / "crop_sheet.png", sheet)
print("wrote", out / "crop_sheet.png")
