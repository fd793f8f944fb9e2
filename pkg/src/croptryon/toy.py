"""Procedural toy corpus in the on-disk dataset layout.

Each record is a flat-shaded figure (hair, face, neck, striped top, arms,
lower garment, legs) with matching parse map and COCO-18 keypoints; the
garment photo is the same striped top laid flat and centred. Proportions
are given as fractions of the canvas so any resolution works.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import data_io
from .data_io import DEFAULT_PALETTE, PoseKeypoints, Sample, SegmentationMap

L = {role: label for label, role in DEFAULT_PALETTE.items()}


def _garment_texture(u, v, colors, freq, phase):
    stripes = (np.floor(v * freq + phase) % 2).astype(int)
    tex = np.where(stripes[..., None] == 0, colors[0], colors[1])
    # a band near the hem so vertical placement is observable
    tex = np.where((v > 0.8)[..., None], colors[2], tex)
    return tex


def _trapezoid(xs, ys, x_mid, top, bottom, half_top, half_bottom):
    """Mask and (u, v) garment coordinates of a vertical trapezoid."""
    v = (ys - top) / (bottom - top)
    half = half_top + (half_bottom - half_top) * np.clip(v, 0, 1)
    u = (xs - (x_mid - half)) / (2 * half)
    inside = (v >= 0) & (v < 1) & (u >= 0) & (u < 1)
    return inside, u, v


def make_toy_sample(sample_id: str, H: int = 64, W: int = 48, rng=None) -> Sample:
    rng = np.random.default_rng(rng)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    cx = W * (0.5 + rng.uniform(-0.08, 0.08))
    s = rng.uniform(0.85, 1.05)
    top = H * rng.uniform(0.02, 0.08)
    skin = np.array([0.85, 0.65, 0.5]) + rng.uniform(-0.1, 0.1, 3)
    hair = rng.uniform(0.0, 0.3, 3)
    pants = rng.uniform(0.1, 0.6, 3)
    bg = np.full(3, rng.uniform(0.8, 0.95))
    colors = rng.uniform(0.0, 1.0, (3, 3))
    freq, phase = rng.uniform(3, 6), rng.uniform(0, 1)

    head_r = 0.075 * H * s
    head_cy = top + head_r * 1.3
    neck_top, neck_bot = head_cy + head_r * 0.8, head_cy + head_r * 1.6
    torso_top, torso_bot = neck_bot, neck_bot + 0.32 * H * s
    half_top, half_bot = 0.22 * W * s, 0.18 * W * s
    leg_top, leg_bot = torso_bot + 0.12 * H * s, min(H - 1.0, torso_bot + 0.45 * H * s)

    labels = np.full((H, W), L["background"], dtype=np.int64)
    image = np.broadcast_to(bg, (H, W, 3)).copy()

    def paint(mask, label, color):
        labels[mask] = label
        image[mask] = color

    lower = (np.abs(xs - cx) < half_bot) & (ys >= torso_bot) & (ys < leg_top)
    legs = (np.abs(np.abs(xs - cx) - half_bot * 0.5) < half_bot * 0.35) & (ys >= leg_top) & (ys < leg_bot)
    arm_x = half_top + 0.07 * W * s
    arms = (np.abs(np.abs(xs - cx) - arm_x) < 0.06 * W * s) & (ys >= torso_top) & (ys < torso_bot + 0.05 * H)
    neck = (np.abs(xs - cx) < head_r * 0.45) & (ys >= neck_top) & (ys < neck_bot + 1)
    face = (xs - cx) ** 2 + (ys - head_cy) ** 2 < head_r ** 2
    hair_m = face & (ys < head_cy - head_r * 0.35)
    torso, u, v = _trapezoid(xs, ys, cx, torso_top, torso_bot, half_top, half_bot)

    paint(legs, L["legs"], skin)
    paint(lower, L["lower_clothes"], pants)
    paint(arms, L["arms"], skin * 0.95)
    paint(neck, L["neck"], skin * 0.9)
    paint(face, L["face"], skin)
    paint(hair_m, L["hair"], hair)
    tex = _garment_texture(u, v, colors, freq, phase)
    image[torso] = tex[torso]
    labels[torso] = L["upper_clothes"]

    # garment photo: same shape, flat, centred, larger
    cloth = np.ones((H, W, 3))
    c_inside, cu, cv = _trapezoid(xs, ys, W / 2, 0.12 * H, 0.88 * H, 0.36 * W, 0.3 * W)
    cloth[c_inside] = _garment_texture(cu, cv, colors, freq, phase)[c_inside]
    mask = c_inside.astype(np.float64)

    def kp(x, y):
        return [float(np.clip(x, 0, W - 1)), float(np.clip(y, 0, H - 1)), 1.0]

    mid_arm = (torso_top + torso_bot) / 2
    wrist = torso_bot + 0.04 * H
    knee = (leg_top + leg_bot) / 2
    pts = [
        kp(cx, head_cy + head_r * 0.2), kp(cx, neck_bot),
        kp(cx - arm_x, torso_top), kp(cx - arm_x, mid_arm), kp(cx - arm_x, wrist),
        kp(cx + arm_x, torso_top), kp(cx + arm_x, mid_arm), kp(cx + arm_x, wrist),
        kp(cx - half_bot * 0.5, torso_bot), kp(cx - half_bot * 0.5, knee), kp(cx - half_bot * 0.5, leg_bot - 1),
        kp(cx + half_bot * 0.5, torso_bot), kp(cx + half_bot * 0.5, knee), kp(cx + half_bot * 0.5, leg_bot - 1),
        kp(cx - head_r * 0.4, head_cy - head_r * 0.2), kp(cx + head_r * 0.4, head_cy - head_r * 0.2),
        kp(cx - head_r, head_cy), kp(cx + head_r, head_cy),
    ]

    noise = rng.normal(0, 0.01, image.shape)
    image = np.clip(image + noise, 0, 1)
    # quantise now so the record round-trips through 8-bit files unchanged
    q = lambda a: data_io.to_uint8(a) / 255.0
    return Sample(
        sample_id=sample_id,
        person_image=q(image),
        cloth_image=q(cloth),
        cloth_mask=mask,
        parse=SegmentationMap(labels, DEFAULT_PALETTE),
        keypoints=PoseKeypoints(np.array(pts)),
    )


def make_toy_dataset(root, n_train: int = 16, n_test: int = 16, H: int = 64, W: int = 48,
                     seed: int = 0) -> Path:
    """Write a toy dataset with paired train pairs and paired/unpaired test pairs."""
    root = Path(root)
    data_io.save_palette(root, DEFAULT_PALETTE)
    for split, n, offset in (("train", n_train, 0), ("test", n_test, 1)):
        ids = [f"{i:05d}" for i in range(1, n + 1)]
        for i, sid in enumerate(ids):
            sample = make_toy_sample(sid, H, W, rng=[seed, offset, i])
            data_io.save_sample(root, sample, split)
        data_io.write_pairs(root, split, "paired", [(p, p) for p in ids])
        if n > 1:
            mixed = [(p, ids[(i + 1) % n]) for i, p in enumerate(ids)]
            data_io.write_pairs(root, split, "unpaired", mixed)
    return root
