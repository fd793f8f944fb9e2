"""Thin-plate-spline warps for garment deformation.

Coordinates are normalised to [-1, 1]^2 with x to the right and y down,
pixel centres at ``(2j + 1)/W - 1`` (the ``align_corners=False``
convention of ``torch.nn.functional.grid_sample``). All functions accept an
optional leading batch dimension and are differentiable.

The spline is ``f(p) = A p + t + sum_i w_i U(|p - p_i|)`` with
``U(r) = r^2 log r^2`` and ``U(0) = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import SingularityError


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def tps_kernel(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """U(|a_i - b_j|) for point sets (..., N, 2) and (..., M, 2)."""
    d2 = ((a.unsqueeze(-2) - b.unsqueeze(-3)) ** 2).sum(-1)
    # where() keeps the gradient finite at coincident points.
    safe = torch.where(d2 > 0, d2, torch.ones_like(d2))
    return torch.where(d2 > 0, d2 * torch.log(safe), torch.zeros_like(d2))


def canonical_grid(rows: int = 5, cols: int = 5, dtype=torch.float64) -> torch.Tensor:
    """Evenly spaced control points over [-1, 1]^2, row-major, shape (rows*cols, 2)."""
    ys = torch.linspace(-1.0, 1.0, rows, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, cols, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)


@dataclass
class TPSParams:
    src_points: torch.Tensor  # (..., K, 2)
    dst_points: torch.Tensor  # (..., K, 2)
    affine: torch.Tensor      # (..., 2, 3): [linear | translation]
    weights: torch.Tensor     # (..., K, 2)
    reg: float = 0.0

    def __call__(self, points) -> torch.Tensor:
        return tps_transform(self, points)


def _check_geometry(src: torch.Tensor):
    k = src.shape[-2]
    if k < 3:
        raise SingularityError(f"need at least 3 control points, got {k}")
    centred = src.detach() - src.detach().mean(dim=-2, keepdim=True)
    sv = torch.linalg.svdvals(centred)
    if (sv[..., -1] <= 1e-12 * sv[..., 0].clamp_min(1e-300)).any():
        raise SingularityError(
            "control points are collinear; the affine part is undetermined "
            "for any regularisation")


def solve_tps(src, dst, reg: float = 0.0) -> TPSParams:
    """Fit the spline mapping ``src`` onto ``dst``.

    Solves ``[[K + reg*I, P], [P^T, 0]] [W; a] = [dst; 0]`` with
    ``P = [1, x, y]``. With ``reg == 0`` the map interpolates exactly.
    """
    if reg < 0:
        raise ValueError("reg must be >= 0")
    src = _as_tensor(src)
    dst = _as_tensor(dst, src.dtype)
    _check_geometry(src)
    k = src.shape[-2]
    batch = src.shape[:-2]

    kmat = tps_kernel(src, src)
    if reg:
        kmat = kmat + reg * torch.eye(k, dtype=src.dtype)
    ones = torch.ones(batch + (k, 1), dtype=src.dtype)
    p = torch.cat([ones, src], dim=-1)
    top = torch.cat([kmat, p], dim=-1)
    bottom = torch.cat([p.transpose(-1, -2), torch.zeros(batch + (3, 3), dtype=src.dtype)], dim=-1)
    lmat = torch.cat([top, bottom], dim=-2)
    rhs = torch.cat([dst, torch.zeros(batch + (3, 2), dtype=src.dtype)], dim=-2)
    try:
        sol = torch.linalg.solve(lmat, rhs)
    except RuntimeError as exc:
        raise SingularityError(
            f"TPS system is singular ({exc}); use reg > 0 for duplicated control points") from exc
    if not torch.isfinite(sol).all():
        raise SingularityError("TPS solve produced non-finite values; use reg > 0")

    weights = sol[..., :k, :]
    a = sol[..., k:, :]  # rows: constant, x coefficient, y coefficient
    affine = torch.stack([a[..., 1, :], a[..., 2, :], a[..., 0, :]], dim=-1)
    return TPSParams(src, dst, affine, weights, float(reg))


def tps_transform(params: TPSParams, points) -> torch.Tensor:
    """Evaluate the spline at points (..., N, 2)."""
    pts = _as_tensor(points, params.affine.dtype)
    lin = params.affine[..., :2]
    trans = params.affine[..., 2]
    out = pts @ lin.transpose(-1, -2) + trans.unsqueeze(-2)
    return out + tps_kernel(pts, params.src_points) @ params.weights


def pixel_centres(H: int, W: int, dtype=torch.float64) -> torch.Tensor:
    """Normalised coordinates of every pixel centre, shape (H, W, 2)."""
    ys = (2.0 * torch.arange(H, dtype=dtype) + 1.0) / H - 1.0
    xs = (2.0 * torch.arange(W, dtype=dtype) + 1.0) / W - 1.0
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


@dataclass
class SamplingGrid:
    coords: torch.Tensor  # (..., H, W, 2) normalised source coordinates


def make_sampling_grid(params: TPSParams, H: int, W: int) -> SamplingGrid:
    base = pixel_centres(H, W, params.affine.dtype).reshape(1, H * W, 2)
    batch = params.affine.shape[:-2]
    pts = base.expand(batch + (H * W, 2)) if batch else base[0]
    coords = tps_transform(params, pts)
    return SamplingGrid(coords.reshape(batch + (H, W, 2)))


def warp_image(image, grid: SamplingGrid):
    """Bilinear sampling with border clamping.

    ``image`` is (C, H, W) or (B, C, H, W) as a tensor, or an (H, W[, C])
    numpy array (returned as numpy). Output spatial size follows the grid.
    """
    was_numpy = not isinstance(image, torch.Tensor)
    if was_numpy:
        arr = np.asarray(image, dtype=np.float64)
        img = torch.as_tensor(arr[..., None] if arr.ndim == 2 else arr).permute(2, 0, 1)
    else:
        img = image
    coords = grid.coords.to(img.dtype)
    squeeze = img.dim() == 3
    if squeeze:
        img = img.unsqueeze(0)
    if coords.dim() == 3:
        coords = coords.unsqueeze(0).expand(img.shape[0], -1, -1, -1)
    out = F.grid_sample(img, coords, mode="bilinear", padding_mode="border", align_corners=False)
    if squeeze:
        out = out[0]
    if was_numpy:
        out = out.permute(1, 2, 0).detach().numpy()
        if np.asarray(image).ndim == 2:
            out = out[..., 0]
    return out


def bending_energy(params: TPSParams) -> torch.Tensor:
    """``w_x^T K w_x + w_y^T K w_y``; zero exactly for affine maps.

    The integral of squared second derivatives over the plane equals
    ``16 * pi`` times this value for the ``r^2 log r^2`` kernel.
    """
    kmat = tps_kernel(params.src_points, params.src_points)
    w = params.weights
    return (w * (kmat @ w)).sum(dim=(-1, -2))
