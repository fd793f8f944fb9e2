"""Stage-wise training in the paired setting with crop augmentation in the
data path.

Each iteration: load paired records, build their agnostic representation,
draw one crop window per record, crop every person-side modality with it,
run the stage, take one discriminator step (when adversarial) and one
generator step. Losses are logged per iteration to ``<stage>_losses.csv``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import data_io, networks, tps
from .agnostic import AgnosticConfig, build_agnostic
from .crop import CropConfig, CroppedBundle, CropWindow, crop_sample, derive_rng, sample_crop_window
from .errors import ConfigError, ContractError, DependencyError, NonFiniteLossError
from .networks import NetConfig, one_hot

log = logging.getLogger(__name__)

STAGES = ("seg", "deform", "synth")
PREREQUISITES = {"seg": (), "deform": ("seg",), "synth": ("seg", "deform")}
CSV_COLUMNS = ("iter", "total", "ce", "l1", "adv", "bend", "window_area_frac")

_STAGE_DEFAULTS = {
    "seg": dict(ce_weight=1.0, adv_weight=0.1, l1_weight=0.0, bend_weight=0.0),
    "deform": dict(ce_weight=0.0, adv_weight=0.0, l1_weight=1.0, bend_weight=0.01),
    "synth": dict(ce_weight=0.0, adv_weight=0.1, l1_weight=1.0, bend_weight=0.0),
}
_REQUIRED = {"seg": ("ce_weight",), "deform": ("l1_weight", "bend_weight"),
             "synth": ("l1_weight", "adv_weight")}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "seg"
    epochs: int = 1
    # Overrides ``epochs`` when set: stop after this many optimizer steps.
    max_iters: Optional[int] = None
    batch_size: int = 4
    lr: float = 2e-4
    # defaults match the seg stage; use for_stage for the others
    adv_weight: float = 0.1
    l1_weight: float = 0.0
    ce_weight: float = 1.0
    bend_weight: float = 0.0
    gan_loss: str = "hinge"
    sigma: float = 3.0
    seed: int = 0
    perceptual: bool = False
    perceptual_weights: str = ""
    crop: CropConfig = field(default_factory=CropConfig)
    agnostic: AgnosticConfig = field(default_factory=AgnosticConfig)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        for name in ("adv_weight", "l1_weight", "ce_weight", "bend_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        missing = [n for n in _REQUIRED[self.stage] if getattr(self, n) <= 0]
        if missing:
            raise ConfigError(f"stage {self.stage!r} needs positive {missing}")
        if self.gan_loss not in ("hinge", "bce"):
            raise ConfigError("gan_loss must be 'hinge' or 'bce'")
        if self.batch_size < 1 or self.epochs < 0 or (self.max_iters is not None and self.max_iters < 0):
            raise ConfigError("batch_size must be >= 1 and epochs/max_iters >= 0")
        if self.perceptual and not self.perceptual_weights:
            raise ConfigError("perceptual loss needs perceptual_weights (a VGG19 state dict)")
        if (self.crop.out_h, self.crop.out_w) != self.net.image_size:
            raise ConfigError(
                f"crop output {(self.crop.out_h, self.crop.out_w)} differs from net image_size "
                f"{self.net.image_size}")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        """Config with the stage's default loss weights, then ``overrides``."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        return cls(stage=stage, **{**_STAGE_DEFAULTS[stage], **overrides})


def hinge_gan_losses(real_logits, fake_logits):
    """Hinge adversarial losses averaged over discriminator scales.

    Accepts one tensor or a list of per-scale tensors for each argument.
    Returns ``(d_loss, g_loss)``.
    """
    if isinstance(real_logits, torch.Tensor):
        real_logits, fake_logits = [real_logits], [fake_logits]
    d = [F.relu(1 - r).mean() + F.relu(1 + f).mean() for r, f in zip(real_logits, fake_logits)]
    g = [-f.mean() for f in fake_logits]
    return sum(d) / len(d), sum(g) / len(g)


def bce_gan_losses(real_logits, fake_logits):
    """Non-saturating binary cross-entropy variant of :func:`hinge_gan_losses`."""
    if isinstance(real_logits, torch.Tensor):
        real_logits, fake_logits = [real_logits], [fake_logits]
    bce = F.binary_cross_entropy_with_logits
    d = [bce(r, torch.ones_like(r)) + bce(f, torch.zeros_like(f)) for r, f in zip(real_logits, fake_logits)]
    g = [bce(f, torch.ones_like(f)) for f in fake_logits]
    return sum(d) / len(d), sum(g) / len(g)


GAN_LOSSES = {"hinge": hinge_gan_losses, "bce": bce_gan_losses}


def to_signed(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


def make_batch(bundles: Sequence[CroppedBundle], net_cfg: NetConfig) -> Dict:
    """Stack cropped bundles into network-ready tensors (images in [-1, 1])."""
    def stack_img(attr):
        arr = np.stack([getattr(b, attr) for b in bundles]).astype(np.float32)
        return to_signed(torch.from_numpy(arr).permute(0, 3, 1, 2))

    parse = torch.from_numpy(np.stack([b.parse.labels for b in bundles]))
    ag_parse = torch.from_numpy(np.stack([b.agnostic_parse.labels for b in bundles]))
    mask = torch.from_numpy(np.stack([b.cloth_mask for b in bundles]).astype(np.float32)).unsqueeze(1)
    return {
        "ids": [b.sample_id for b in bundles],
        "cloth_ids": [b.cloth_id for b in bundles],
        "windows": [b.window for b in bundles],
        "person": stack_img("person_image"),
        "agnostic_image": stack_img("agnostic_image"),
        "cloth": stack_img("cloth_image"),
        "cloth_mask": mask,
        "parse": parse.long(),
        "agnostic_parse": one_hot(ag_parse, net_cfg.num_labels),
        "pose_map": torch.from_numpy(np.stack([b.pose_map for b in bundles]).astype(np.float32)),
        "garment_mask": (parse == net_cfg.cloth_label).float().unsqueeze(1),
    }


def person_repr(batch, seg_onehot):
    return torch.cat([batch["agnostic_image"], batch["pose_map"], seg_onehot], 1)


class TryOnPipeline:
    """Segmentation -> deformation -> synthesis chain on one batch."""

    def __init__(self, seg=None, deform=None, synth=None):
        self.seg, self.deform, self.synth = seg, deform, synth

    def segment(self, batch):
        logits = self.seg(batch["agnostic_parse"], batch["pose_map"], batch["cloth"])
        return logits, one_hot(logits.argmax(1), logits.shape[1])

    def warp(self, batch, seg_onehot):
        offsets = self.deform(batch["cloth"], batch["cloth_mask"], person_repr(batch, seg_onehot))
        warped, warped_mask, params = self.deform.warp(batch["cloth"], batch["cloth_mask"], offsets)
        return offsets, warped, warped_mask, params

    @torch.no_grad()
    def __call__(self, batch):
        _, seg_onehot = self.segment(batch)
        _, warped, warped_mask, _ = self.warp(batch, seg_onehot)
        return self.synth(batch["agnostic_image"], warped, warped_mask, seg_onehot)


def stage_loss(stage: str, batch: Dict, outputs: Dict, cfg: TrainConfig):
    """Weighted training objective of one stage.

    ``outputs`` must carry ``stage`` plus, per stage:
    seg: ``seg_logits`` (and ``fake_logits`` if adversarial);
    deform: ``warped_cloth``, ``warped_mask``, ``tps_params``;
    synth: ``tryon`` (and ``fake_logits``).

    The deformation L1 compares the masked warped garment with the garment
    pixels of the person image and adds the mask disagreement, so
    silhouette misalignment is penalised even on flat-coloured garments.

    Returns ``(total, components)``; components are the weighted ce, l1,
    adv and bend terms as floats and sum to ``total``.
    """
    if outputs.get("stage") != stage or stage not in STAGES:
        raise ContractError(f"outputs of stage {outputs.get('stage')!r} given to {stage!r} loss")
    zero = torch.zeros(())
    terms = {"ce": zero, "l1": zero, "adv": zero, "bend": zero}
    gan = GAN_LOSSES[cfg.gan_loss]

    try:
        if stage == "seg":
            terms["ce"] = cfg.ce_weight * F.cross_entropy(outputs["seg_logits"], batch["parse"])
        elif stage == "deform":
            m = batch["garment_mask"]
            pred = outputs["warped_cloth"] * outputs["warped_mask"]
            target = batch["person"] * m
            l1 = (pred - target).abs().mean() + (outputs["warped_mask"] - m).abs().mean()
            terms["l1"] = cfg.l1_weight * l1
            terms["bend"] = cfg.bend_weight * tps.bending_energy(outputs["tps_params"]).mean().float()
        else:
            terms["l1"] = cfg.l1_weight * (outputs["tryon"] - batch["person"]).abs().mean()
            if outputs.get("perceptual") is not None:
                terms["l1"] = terms["l1"] + cfg.l1_weight * outputs["perceptual"]
        if cfg.adv_weight > 0 and stage in ("seg", "synth"):
            fake = outputs["fake_logits"]
            _, g_loss = gan(fake, fake)
            terms["adv"] = cfg.adv_weight * g_loss
    except KeyError as exc:
        raise ContractError(f"stage {stage!r} outputs lack {exc}") from exc

    total = terms["ce"] + terms["l1"] + terms["adv"] + terms["bend"]
    return total, {k: float(v.detach()) for k, v in terms.items()}


class TrainingData:
    """In-memory paired training records with cached agnostic representations."""

    def __init__(self, root, agnostic_cfg: AgnosticConfig, split="train", mode="paired"):
        self.root = Path(root)
        self.pairs = data_io.load_dataset_index(root, split, mode)
        palette = data_io.load_palette(root)
        self.samples = [data_io.load_sample(root, p, c, split, palette=palette) for p, c in self.pairs]
        self.agnostic = [build_agnostic(s, agnostic_cfg) for s in self.samples]

    def __len__(self):
        return len(self.samples)

    def bundle(self, index: int, window: CropWindow, crop_cfg: CropConfig, sigma: float) -> CroppedBundle:
        return crop_sample(self.samples[index], self.agnostic[index], window, crop_cfg, sigma=sigma)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), 2 ** 32 - 1, int(epoch)]).permutation(n)


def _stream_id(cfg: TrainConfig) -> int:
    # Shared windows across stages unless per-stage sampling is requested.
    return STAGES.index(cfg.stage) + 1 if cfg.crop.per_stage else 0


def sample_window(data: TrainingData, index: int, epoch: int, cfg: TrainConfig) -> CropWindow:
    h, w = data.samples[index].size
    seed = cfg.seed if not _stream_id(cfg) else cfg.seed * 7 + _stream_id(cfg)
    return sample_crop_window(h, w, cfg.crop, derive_rng(seed, index, epoch))


def build_models(stage: str, net_cfg: NetConfig):
    """Generator and (for adversarial stages) discriminator of ``stage``."""
    if stage == "seg":
        return networks.SegGenerator(net_cfg), networks.MultiScaleDiscriminator(net_cfg, net_cfg.num_labels)
    if stage == "deform":
        return networks.ClothesDeform(net_cfg), None
    return networks.TryOnSynthesis(net_cfg), networks.MultiScaleDiscriminator(net_cfg, 3)


def load_generator(ckpt_dir, stage: str, net_cfg: NetConfig):
    payload = networks.load_checkpoint(Path(ckpt_dir) / f"{stage}.pt", net_cfg, stage)
    net, _ = build_models(stage, net_cfg)
    net.load_state_dict(payload["modules"]["generator"])
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def load_pipeline(ckpt_dir, net_cfg: NetConfig, stages=STAGES) -> TryOnPipeline:
    return TryOnPipeline(**{s: load_generator(ckpt_dir, s, net_cfg) for s in stages})


class _Perceptual(torch.nn.Module):
    def __init__(self, weights_path):
        super().__init__()
        import torchvision

        vgg = torchvision.models.vgg19(weights=None)
        vgg.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.features = vgg.features[:27].eval()
        for p in self.features.parameters():
            p.requires_grad_(False)

    def forward(self, x, y):
        loss, a, b = 0.0, x, y
        for i, layer in enumerate(self.features):
            a, b = layer(a), layer(b)
            if i in (3, 8, 17, 26):
                loss = loss + (a - b).abs().mean()
        return loss


@dataclass
class TrainResult:
    checkpoint: Path
    losses_csv: Path
    rows: List[Dict]


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def train_stage(cfg: TrainConfig, data_root, out_dir, ckpt_dir=None, data: TrainingData = None) -> TrainResult:
    """Train one stage; earlier stages are loaded frozen from ``ckpt_dir``
    (default ``out_dir``). Writes ``<stage>.pt`` and ``<stage>_losses.csv``."""
    out_dir = Path(out_dir)
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else out_dir
    for pre in PREREQUISITES[cfg.stage]:
        if not (ckpt_dir / f"{pre}.pt").is_file():
            raise DependencyError(
                f"stage {cfg.stage!r} needs the {pre!r} checkpoint at {ckpt_dir / (pre + '.pt')}")
    frozen = load_pipeline(ckpt_dir, cfg.net, PREREQUISITES[cfg.stage])
    if data is None:
        data = TrainingData(data_root, cfg.agnostic)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    gen, disc = build_models(cfg.stage, cfg.net)
    adversarial = disc is not None and cfg.adv_weight > 0
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.5, 0.999)) if adversarial else None
    gan = GAN_LOSSES[cfg.gan_loss]
    perceptual = _Perceptual(cfg.perceptual_weights) if cfg.perceptual and cfg.stage == "synth" else None

    n = len(data)
    total_iters = cfg.max_iters if cfg.max_iters is not None else cfg.epochs * -(-n // cfg.batch_size)
    rows, it, epoch = [], 0, 0
    while it < total_iters:
        order = epoch_order(cfg.seed, epoch, n)
        for start in range(0, n, cfg.batch_size):
            if it >= total_iters:
                break
            idx = order[start:start + cfg.batch_size]
            bundles = [data.bundle(i, sample_window(data, i, epoch, cfg), cfg.crop, cfg.sigma) for i in idx]
            batch = make_batch(bundles, cfg.net)
            row = _train_step(cfg, batch, gen, disc, frozen, opt_g, opt_d, gan, perceptual, adversarial)
            it += 1
            row = {"iter": it, **row,
                   "window_area_frac": float(np.mean([w.area_fraction for w in batch["windows"]]))}
            if not all(np.isfinite(row[k]) for k in CSV_COLUMNS[1:]):
                diag = {"iter": it, "ids": batch["ids"], "windows": [w.to_dict() for w in batch["windows"]],
                        "losses": {k: row[k] for k in CSV_COLUMNS[1:]}}
                (out_dir / f"{cfg.stage}_nonfinite_batch.json").write_text(json.dumps(diag, indent=1))
                raise NonFiniteLossError(
                    f"non-finite loss at iteration {it} (ids {batch['ids']}); see diagnostic dump", diag)
            rows.append(row)
        epoch += 1

    csv_path = out_dir / f"{cfg.stage}_losses.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    modules = {"generator": gen}
    if disc is not None:
        modules["discriminator"] = disc
    ckpt = out_dir / f"{cfg.stage}.pt"
    networks.save_checkpoint(ckpt, cfg.stage, cfg.net, modules, extra={"iters": it, "seed": cfg.seed})
    log.info("stage %s: %d iterations, final total %.4f", cfg.stage, it, rows[-1]["total"] if rows else float("nan"))
    return TrainResult(ckpt, csv_path, rows)


def _train_step(cfg, batch, gen, disc, frozen, opt_g, opt_d, gan, perceptual, adversarial):
    stage = cfg.stage
    outputs = {"stage": stage}
    if stage == "seg":
        logits = gen(batch["agnostic_parse"], batch["pose_map"], batch["cloth"])
        outputs["seg_logits"] = logits
        fake_img, real_img = logits.softmax(1), one_hot(batch["parse"], cfg.net.num_labels)
        cond = batch["agnostic_parse"]
    else:
        with torch.no_grad():
            _, seg_onehot = frozen.segment(batch)
        if stage == "deform":
            offsets = gen(batch["cloth"], batch["cloth_mask"], person_repr(batch, seg_onehot))
            warped, warped_mask, params = gen.warp(batch["cloth"], batch["cloth_mask"], offsets)
            outputs.update(warped_cloth=warped, warped_mask=warped_mask, tps_params=params)
        else:
            with torch.no_grad():
                _, warped, warped_mask, _ = frozen.warp(batch, seg_onehot)
            tryon = gen(batch["agnostic_image"], warped, warped_mask, seg_onehot)
            outputs["tryon"] = tryon
            if perceptual is not None:
                outputs["perceptual"] = perceptual(tryon, batch["person"])
            fake_img, real_img, cond = tryon, batch["person"], seg_onehot

    if adversarial:
        d_real = disc(real_img, cond, batch["cloth"])
        d_fake = disc(fake_img.detach(), cond, batch["cloth"])
        d_loss, _ = gan(d_real, d_fake)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()
        for p in disc.parameters():
            p.requires_grad_(False)
        outputs["fake_logits"] = disc(fake_img, cond, batch["cloth"])

    total, parts = stage_loss(stage, batch, outputs, cfg)
    opt_g.zero_grad()
    total.backward()
    opt_g.step()
    if adversarial:
        for p in disc.parameters():
            p.requires_grad_(True)
    return {"total": float(total.detach()), **parts}
