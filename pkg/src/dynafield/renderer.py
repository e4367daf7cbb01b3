"""Differentiable Gaussian splatting renderer.

Projects Gaussians into a camera with the first-order (EWA) covariance
approximation, depth-sorts them, and alpha-composites an arbitrary payload
(RGB color, static semantic features or time-varying features) per pixel.
Everything is expressed in torch ops so gradients flow to all upstream
parameters: means, rotations, scales, opacities and payloads.

Desk-scale by design: per-pixel full sort over all Gaussians, no tiling.
Depth ties are broken by Gaussian index ascending for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .scene import CameraModel, GaussianCloud

NEAR_PLANE = 0.01
GUARD_BAND = 1.3
COV2D_REGULARIZER = 0.3


@dataclass
class RenderPrimitives:
    """Projected (non-culled) Gaussians, ordered as in the input cloud."""

    means2d: torch.Tensor  # (M, 2)
    cov2d: torch.Tensor  # (M, 2, 2)
    depths: torch.Tensor  # (M,)
    kept: torch.Tensor  # (M,) long indices into the input arrays


@dataclass
class FeatureImage:
    """A rendered (H, W, C) payload image plus the alpha accumulation plane."""

    values: torch.Tensor  # (H, W, C)
    alpha: torch.Tensor  # (H, W)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def quaternion_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3) rotation matrices."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], dim=-2)


def covariance3d(rotations: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """Sigma = R diag(exp(2s)) R^T for each Gaussian."""
    rot = quaternion_to_rotation(rotations)
    scale2 = torch.exp(2.0 * log_scales)
    return rot @ (scale2.unsqueeze(-1) * rot.transpose(-1, -2))


def project(
    means3d: torch.Tensor,
    rotations: torch.Tensor,
    log_scales: torch.Tensor,
    camera: CameraModel,
    dtype: torch.dtype = torch.float32,
) -> RenderPrimitives:
    """Project Gaussians into the camera; culled Gaussians are dropped.

    Culling: camera-space depth <= 0.01 or projected mean outside a 1.3x
    guard band around the image.
    """
    w2c = torch.as_tensor(camera.world_to_camera, dtype=dtype)
    rot_w2c = w2c[:3, :3]
    trans = w2c[:3, 3]
    cam_pts = means3d @ rot_w2c.T + trans
    x, y, z = cam_pts.unbind(-1)

    z_safe = torch.clamp(z, min=NEAR_PLANE)
    u = camera.fx * x / z_safe + camera.cx
    v = camera.fy * y / z_safe + camera.cy
    means2d = torch.stack([u, v], dim=-1)

    half_w = camera.width * (GUARD_BAND - 1.0) / 2.0
    half_h = camera.height * (GUARD_BAND - 1.0) / 2.0
    keep = (
        (z > NEAR_PLANE)
        & (u >= -half_w)
        & (u <= camera.width + half_w)
        & (v >= -half_h)
        & (v <= camera.height + half_h)
    )
    kept = torch.nonzero(keep).flatten()

    cov3d = covariance3d(rotations, log_scales)
    # Jacobian of the perspective projection at each mean.
    zero = torch.zeros_like(z_safe)
    jac = torch.stack(
        [
            torch.stack([camera.fx / z_safe, zero, -camera.fx * x / z_safe**2], -1),
            torch.stack([zero, camera.fy / z_safe, -camera.fy * y / z_safe**2], -1),
        ],
        dim=-2,
    )  # (N, 2, 3)
    jw = jac @ rot_w2c
    cov2d = jw @ cov3d @ jw.transpose(-1, -2)
    eye = torch.eye(2, dtype=dtype)
    cov2d = cov2d + COV2D_REGULARIZER * eye

    return RenderPrimitives(
        means2d=means2d[kept],
        cov2d=cov2d[kept],
        depths=z[kept],
        kept=kept,
    )


def composite_pixel(payloads: torch.Tensor, alphas: torch.Tensor) -> torch.Tensor:
    """Front-to-back alpha compositing of one depth-ascending primitive list.

    Returns sum_i payload_i * alpha_i * prod_{j<i} (1 - alpha_j). The sum is
    evaluated exactly (no transmittance cutoff) so it agrees with the direct
    blending formula to float precision.
    """
    if payloads.shape[0] == 0:
        return torch.zeros(payloads.shape[1:], dtype=payloads.dtype)
    one = torch.ones(1, dtype=alphas.dtype)
    trans = torch.cumprod(torch.cat([one, 1.0 - alphas[:-1]]), dim=0)
    weights = alphas * trans
    return (weights.unsqueeze(-1) * payloads).sum(dim=0)


def _pixel_coords(
    width: int,
    height: int,
    dtype: torch.dtype,
    pixel_indices: torch.Tensor | None = None,
) -> torch.Tensor:
    """(P, 2) pixel-center coordinates, full grid or flat-index subset."""
    if pixel_indices is None:
        ys, xs = torch.meshgrid(
            torch.arange(height, dtype=dtype),
            torch.arange(width, dtype=dtype),
            indexing="ij",
        )
        return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)
    idx = pixel_indices.to(torch.long)
    xs = (idx % width).to(dtype)
    ys = torch.div(idx, width, rounding_mode="floor").to(dtype)
    return torch.stack([xs, ys], dim=-1)


def _alpha_weights(
    prims: RenderPrimitives,
    opacities: torch.Tensor,
    width: int,
    height: int,
    pixel_indices: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-pixel compositing weights (M, P) in depth order."""
    dtype = prims.means2d.dtype
    order = torch.argsort(prims.depths, stable=True)
    means2d = prims.means2d[order]
    cov2d = prims.cov2d[order]
    base_opacity = opacities[order]

    pix = _pixel_coords(width, height, dtype, pixel_indices)  # (P, 2)

    d = pix.unsqueeze(0) - means2d.unsqueeze(1)  # (M, P, 2)
    a = cov2d[:, 0, 0].unsqueeze(-1)
    b = cov2d[:, 0, 1].unsqueeze(-1)
    c = cov2d[:, 1, 1].unsqueeze(-1)
    det = a * c - b * b
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
    power = torch.clamp(power, max=0.0)
    alpha = base_opacity.unsqueeze(-1) * torch.exp(power)  # (M, P)

    ones = torch.ones((1, alpha.shape[1]), dtype=dtype)
    trans = torch.cumprod(torch.cat([ones, 1.0 - alpha[:-1]], dim=0), dim=0)
    return alpha * trans


def render_pixels(
    means3d: torch.Tensor,
    rotations: torch.Tensor,
    log_scales: torch.Tensor,
    opacity_logits: torch.Tensor,
    payload: torch.Tensor,
    camera: CameraModel,
    pixel_indices: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Composite the payload at a flat-index subset of pixels.

    Returns (values (P, C), alpha (P,)). Identical to slicing the full
    render at the same indices, at a fraction of the cost; the training
    loop uses this for stochastic pixel losses.
    """
    dtype = means3d.dtype
    channels = payload.shape[1]
    num = pixel_indices.shape[0]
    prims = project(means3d, rotations, log_scales, camera, dtype=dtype)
    if prims.kept.numel() == 0:
        return (
            torch.zeros((num, channels), dtype=dtype),
            torch.zeros((num,), dtype=dtype),
        )
    opacities = torch.sigmoid(opacity_logits)[prims.kept]
    kept_payload = payload[prims.kept]
    order = torch.argsort(prims.depths, stable=True)
    weights = _alpha_weights(
        prims, opacities, camera.width, camera.height, pixel_indices
    )
    values = torch.einsum("mp,mc->pc", weights, kept_payload[order])
    return values, weights.sum(dim=0)


def render_arrays(
    means3d: torch.Tensor,
    rotations: torch.Tensor,
    log_scales: torch.Tensor,
    opacity_logits: torch.Tensor,
    payload: torch.Tensor,
    camera: CameraModel,
) -> FeatureImage:
    """Render an arbitrary per-Gaussian payload (N, C) through the camera."""
    dtype = means3d.dtype
    height, width = camera.height, camera.width
    channels = payload.shape[1]
    prims = project(means3d, rotations, log_scales, camera, dtype=dtype)
    if prims.kept.numel() == 0:
        return FeatureImage(
            values=torch.zeros((height, width, channels), dtype=dtype),
            alpha=torch.zeros((height, width), dtype=dtype),
        )
    opacities = torch.sigmoid(opacity_logits)[prims.kept]
    kept_payload = payload[prims.kept]
    order = torch.argsort(prims.depths, stable=True)

    weights = _alpha_weights(prims, opacities, width, height)  # (M, P)
    image = torch.einsum("mp,mc->pc", weights, kept_payload[order])
    alpha_acc = weights.sum(dim=0)
    return FeatureImage(
        values=image.reshape(height, width, channels),
        alpha=alpha_acc.reshape(height, width),
    )


def render(
    cloud: GaussianCloud,
    deformation,
    camera: CameraModel,
    payload_kind: str,
    payload: torch.Tensor | None = None,
) -> FeatureImage:
    """Render a cloud under a deformation at the camera's timestamp.

    payload_kind selects the per-Gaussian payload:
      "color"                         -> RGB
      "static:<level>"                -> compressed static semantics
      "timeVarying"                   -> convex prototype combination at t
      "custom"                        -> caller-provided (N, C) payload
    ``deformation`` must provide deform_geometry(cloud, t) and, for the
    time-varying payload, time_varying_features(cloud, t).
    """
    t = camera.t
    means, rots, scales = deformation.deform_geometry(cloud, t)
    if payload_kind == "color":
        data = cloud.colors
    elif payload_kind.startswith("static:"):
        data = cloud.static_semantics[payload_kind.split(":", 1)[1]]
    elif payload_kind == "timeVarying":
        data = deformation.time_varying_features(cloud, t)
    elif payload_kind == "custom":
        if payload is None:
            raise ValueError("custom payload kind requires an explicit payload")
        data = payload
    else:
        raise ValueError(f"unknown payload kind '{payload_kind}'")
    return render_arrays(means, rots, scales, cloud.opacity_logits, data, camera)
