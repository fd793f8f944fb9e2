"""Three generators (segmentation, garment deformation, try-on synthesis)
and a two-scale patch discriminator, sized for CPU training.

Image tensors are (B, C, H, W) in [-1, 1]; label maps enter as one-hot
(B, L, H, W); pose maps as 18-channel heatmaps.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tps
from .data_io import NUM_KEYPOINTS
from .errors import ConfigError, DependencyError, ShapeError

DEPTH = 4
CHECKPOINT_FORMAT = "croptryon.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 16
    num_labels: int = 10
    image_size: Tuple[int, int] = (512, 384)
    tps_grid: Tuple[int, int] = (5, 5)
    latent_noise: bool = False
    cloth_label: int = 4

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "tps_grid", tuple(int(v) for v in self.tps_grid))
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        h, w = self.image_size
        if h % 2 ** DEPTH or w % 2 ** DEPTH:
            raise ConfigError(f"image_size {self.image_size} must be divisible by {2 ** DEPTH}")
        if not 0 <= self.cloth_label < self.num_labels:
            raise ConfigError("cloth_label must be a valid label index")

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["tps_grid"] = list(self.tps_grid)
        return d


def _check(x: torch.Tensor, channels: int, size, name: str):
    if x.dim() != 4:
        raise ShapeError(f"{name}: expected (B, C, H, W), got {tuple(x.shape)}")
    if x.shape[1] != channels or tuple(x.shape[2:]) != tuple(size):
        raise ShapeError(
            f"{name}: expected {channels} channels at {tuple(size)}, got {tuple(x.shape[1:])}")


def _down(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 4, stride=2, padding=1, bias=False),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2, inplace=True),
    )


def _conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2, inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, cin, cout, base):
        super().__init__()
        chans = [base * min(2 ** i, 8) for i in range(DEPTH + 1)]
        self.inc = _conv(cin, chans[0])
        self.downs = nn.ModuleList(_down(chans[i], chans[i + 1]) for i in range(DEPTH))
        self.ups = nn.ModuleList(_conv(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(DEPTH)))
        self.out = nn.Conv2d(chans[0], cout, 1)

    def forward(self, x):
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        y = skips.pop()
        for up in self.ups:
            skip = skips.pop()
            y = F.interpolate(y, size=skip.shape[2:], mode="nearest")
            y = up(torch.cat([y, skip], dim=1))
        return self.out(y)


class SegGenerator(nn.Module):
    """Predicts the person's full parse from the agnostic parse, pose and garment."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        cin = cfg.num_labels + NUM_KEYPOINTS + 3 + int(cfg.latent_noise)
        self.net = UNet(cin, cfg.num_labels, cfg.base_channels)

    def forward(self, agnostic_parse, pose_map, cloth):
        cfg = self.cfg
        _check(agnostic_parse, cfg.num_labels, cfg.image_size, "agnostic_parse")
        _check(pose_map, NUM_KEYPOINTS, cfg.image_size, "pose_map")
        _check(cloth, 3, cfg.image_size, "cloth")
        parts = [agnostic_parse, pose_map, cloth]
        if cfg.latent_noise:
            parts.append(torch.randn_like(cloth[:, :1]))
        return self.net(torch.cat(parts, dim=1))


def seg_generator_forward(net: SegGenerator, agnostic_parse, pose_map, cloth):
    return net(agnostic_parse, pose_map, cloth)


class _Encoder(nn.Sequential):
    def __init__(self, cin, base):
        chans = [cin] + [base * min(2 ** i, 8) for i in range(DEPTH)]
        super().__init__(*[_down(chans[i], chans[i + 1]) for i in range(DEPTH)])


class ClothesDeform(nn.Module):
    """Regresses TPS control-point offsets from garment/person correlation.

    The last linear layer starts at zero, so an untrained model produces
    the identity warp.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        self.cloth_enc = _Encoder(4, b)
        self.person_enc = _Encoder(3 + NUM_KEYPOINTS + cfg.num_labels, b)
        h, w = (s // 2 ** DEPTH for s in cfg.image_size)
        self.regressor = nn.Sequential(
            _conv(h * w, 4 * b),
            _conv(4 * b, 4 * b),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        rows, cols = cfg.tps_grid
        self.head = nn.Linear(4 * b, 2 * rows * cols)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.register_buffer("control_points", tps.canonical_grid(rows, cols, torch.float64))

    def forward(self, cloth, cloth_mask, person_repr):
        cfg = self.cfg
        _check(cloth, 3, cfg.image_size, "cloth")
        _check(cloth_mask, 1, cfg.image_size, "cloth_mask")
        _check(person_repr, 3 + NUM_KEYPOINTS + cfg.num_labels, cfg.image_size, "person_repr")
        fa = F.normalize(self.cloth_enc(torch.cat([cloth, cloth_mask], 1)), dim=1)
        fb = F.normalize(self.person_enc(person_repr), dim=1)
        n, c, h, w = fa.shape
        # corr[:, i, y, x] = <cloth feature at location i, person feature at (y, x)>
        corr = torch.einsum("nci,ncj->nij", fa.flatten(2), fb.flatten(2)).reshape(n, h * w, h, w)
        rows, cols = cfg.tps_grid
        return torch.tanh(self.head(self.regressor(corr))).reshape(n, 2, rows, cols)

    def tps_params(self, offsets) -> tps.TPSParams:
        # Solved in float64: the 28x28 system loses ~1e-5 in float32.
        n = offsets.shape[0]
        src = self.control_points.double().expand(n, -1, -1)
        dst = src + offsets.double().permute(0, 2, 3, 1).reshape(n, -1, 2)
        return tps.solve_tps(src, dst)

    def warp(self, cloth, cloth_mask, offsets):
        """Warp garment and mask; returns (warped_cloth, warped_mask, params)."""
        params = self.tps_params(offsets)
        grid = tps.make_sampling_grid(params, *self.cfg.image_size)
        warped = tps.warp_image(torch.cat([cloth, cloth_mask], 1), grid)
        return warped[:, :3], warped[:, 3:], params


def clothes_deform_forward(net: ClothesDeform, cloth, cloth_mask, person_repr):
    return net(cloth, cloth_mask, person_repr)


def misalignment_mask(seg_onehot, warped_mask, cloth_label: int):
    """Predicted garment region not covered by the warped garment."""
    return (seg_onehot[:, cloth_label:cloth_label + 1] - warped_mask).clamp(0.0, 1.0)


class SPADE(nn.Module):
    """Instance norm whose scale and shift are predicted from the layout."""

    def __init__(self, channels, label_nc, hidden):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(label_nc, hidden, 3, padding=1), nn.ReLU(inplace=True))
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x, seg):
        seg = F.interpolate(seg, size=x.shape[2:], mode="nearest")
        h = self.shared(seg)
        return self.norm(x) * (1 + self.gamma(h)) + self.beta(h)


class _SpadeUp(nn.Module):
    def __init__(self, cin, cout, label_nc, hidden):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.spade = SPADE(cout, label_nc, hidden)

    def forward(self, x, seg):
        return F.leaky_relu(self.spade(self.conv(x), seg), 0.2)


class TryOnSynthesis(nn.Module):
    """Fuses agnostic person, warped garment and misalignment mask into the
    final image; decoder normalisation is modulated by the parse layout."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        chans = [b * min(2 ** i, 8) for i in range(DEPTH + 1)]
        self.inc = nn.Sequential(nn.Conv2d(7, chans[0], 3, padding=1), nn.LeakyReLU(0.2))
        self.downs = nn.ModuleList(_down(chans[i], chans[i + 1]) for i in range(DEPTH))
        self.ups = nn.ModuleList(
            _SpadeUp(chans[i + 1] + chans[i], chans[i], cfg.num_labels, b) for i in reversed(range(DEPTH)))
        self.out = nn.Conv2d(chans[0], 3, 3, padding=1)

    def forward(self, agnostic_image, warped_cloth, warped_mask, seg_onehot):
        cfg = self.cfg
        _check(agnostic_image, 3, cfg.image_size, "agnostic_image")
        _check(warped_cloth, 3, cfg.image_size, "warped_cloth")
        _check(warped_mask, 1, cfg.image_size, "warped_mask")
        _check(seg_onehot, cfg.num_labels, cfg.image_size, "seg_map")
        mis = misalignment_mask(seg_onehot, warped_mask, cfg.cloth_label)
        skips = [self.inc(torch.cat([agnostic_image, warped_cloth * warped_mask, mis], 1))]
        for down in self.downs:
            skips.append(down(skips[-1]))
        y = skips.pop()
        for up in self.ups:
            skip = skips.pop()
            y = F.interpolate(y, size=skip.shape[2:], mode="nearest")
            y = up(torch.cat([y, skip], 1), seg_onehot)
        return torch.tanh(self.out(y))


def tryon_synthesis_forward(net: TryOnSynthesis, agnostic_image, warped_cloth, warped_mask, seg_onehot):
    return net(agnostic_image, warped_cloth, warped_mask, seg_onehot)


class PatchDiscriminator(nn.Sequential):
    def __init__(self, cin, base):
        super().__init__(
            nn.Conv2d(cin, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            _down(base, 2 * base),
            _down(2 * base, 4 * base),
            nn.Conv2d(4 * base, 1, 3, padding=1),
        )


class MultiScaleDiscriminator(nn.Module):
    """Patch logits at H/8 x W/8 and, on a 2x downsampled input, H/16 x W/16."""

    def __init__(self, cfg: NetConfig, image_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.image_channels = image_channels
        cin = image_channels + cfg.num_labels + 3
        self.scales = nn.ModuleList(PatchDiscriminator(cin, cfg.base_channels) for _ in range(2))

    def forward(self, image, seg_onehot, cloth):
        cfg = self.cfg
        _check(image, self.image_channels, cfg.image_size, "image")
        _check(seg_onehot, cfg.num_labels, cfg.image_size, "condition seg")
        _check(cloth, 3, cfg.image_size, "condition cloth")
        x = torch.cat([image, seg_onehot, cloth], 1)
        outs = []
        for i, d in enumerate(self.scales):
            if i:
                x = F.avg_pool2d(x, 2)
            outs.append(d(x))
        return outs


def discriminator_forward(net: MultiScaleDiscriminator, image, seg_onehot, cloth):
    return net(image, seg_onehot, cloth)


def one_hot(labels: torch.Tensor, num_labels: int) -> torch.Tensor:
    """(B, H, W) integer labels -> (B, L, H, W) float one-hot."""
    return F.one_hot(labels.long(), num_labels).permute(0, 3, 1, 2).float()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def save_checkpoint(path, stage: str, cfg: NetConfig, modules: Dict[str, nn.Module], extra=None):
    """Versioned container: format tag, config echo and named state dicts."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "net_cfg": cfg.to_dict(),
        "modules": {name: m.state_dict() for name, m in modules.items()},
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, cfg: NetConfig, stage: str = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DependencyError(f"missing checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DependencyError(f"{path} is not a checkpoint of this package")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DependencyError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if stage is not None and payload.get("stage") != stage:
        raise DependencyError(f"{path} holds stage {payload.get('stage')!r}, expected {stage!r}")
    if payload["net_cfg"] != cfg.to_dict():
        raise DependencyError(
            f"{path} was trained with {payload['net_cfg']}, current config is {cfg.to_dict()}")
    return payload


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
