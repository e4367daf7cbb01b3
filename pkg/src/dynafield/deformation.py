"""Spatiotemporal deformation field.

A HexPlane-style grid factors the 4D (x, y, z, t) volume into six 2D feature
planes; per-query fusion is the elementwise product of the six bilinear
samples at each resolution, concatenated across resolutions. Small MLP heads
decode the fused feature into geometry deltas (position, rotation, scale)
and into K status logits whose softmax weights blend the per-Gaussian state
prototypes into the time-varying semantic feature.
"""

from __future__ import annotations

import torch
from torch import nn

from .numerics import DenseNet
from .scene import GaussianCloud

PLANE_PAIRS = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))  # (x,y,z,t) axes


class HexPlaneGrid(nn.Module):
    """Six 2D feature planes per resolution over a scene bounding box."""

    def __init__(
        self,
        aabb_min,
        aabb_max,
        resolutions: tuple[int, ...] = (16, 32),
        feature_width: int = 16,
        init_scale: float = 0.1,
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.resolutions = tuple(resolutions)
        self.feature_width = feature_width
        aabb_min = torch.as_tensor(aabb_min, dtype=dtype)
        aabb_max = torch.as_tensor(aabb_max, dtype=dtype)
        if torch.any(aabb_max <= aabb_min):
            raise ValueError("degenerate bounding box")
        self.register_buffer("aabb_min", aabb_min)
        self.register_buffer("aabb_max", aabb_max)
        planes = []
        for res in self.resolutions:
            if res < 2:
                raise ValueError("plane resolution must be >= 2")
            for _ in PLANE_PAIRS:
                # centered at 1 so the six-way product fusion starts near 1
                # instead of vanishing as init_scale^6
                plane = (
                    1.0
                    + torch.randn((feature_width, res, res), generator=generator, dtype=dtype)
                    * init_scale
                )
                planes.append(nn.Parameter(plane))
        self.planes = nn.ParameterList(planes)

    @property
    def fused_width(self) -> int:
        return self.feature_width * len(self.resolutions)

    def _bilinear(self, plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Sample (h, R, R) plane at normalized coords u, v in [0, 1] -> (N, h)."""
        res = plane.shape[1]
        gu = torch.clamp(u, 0.0, 1.0) * (res - 1)
        gv = torch.clamp(v, 0.0, 1.0) * (res - 1)
        u0 = torch.clamp(gu.floor().long(), max=res - 2)
        v0 = torch.clamp(gv.floor().long(), max=res - 2)
        fu = (gu - u0).unsqueeze(-1)
        fv = (gv - v0).unsqueeze(-1)
        p00 = plane[:, v0, u0].T
        p01 = plane[:, v0, u0 + 1].T
        p10 = plane[:, v0 + 1, u0].T
        p11 = plane[:, v0 + 1, u0 + 1].T
        return (
            p00 * (1 - fu) * (1 - fv)
            + p01 * fu * (1 - fv)
            + p10 * (1 - fu) * fv
            + p11 * fu * fv
        )

    def sample(self, positions: torch.Tensor, t: float | torch.Tensor) -> torch.Tensor:
        """Fused feature (N, feature_width * len(resolutions)).

        Positions outside the bounding box clamp to it; t must be in [0, 1].
        """
        n = positions.shape[0]
        span = self.aabb_max - self.aabb_min
        norm_xyz = (positions - self.aabb_min) / span
        if not torch.is_tensor(t):
            t = torch.full((n,), float(t), dtype=positions.dtype)
        coords = torch.cat([norm_xyz, t.reshape(n, 1)], dim=-1)  # (N, 4)
        outputs = []
        for r_idx in range(len(self.resolutions)):
            fused = None
            for p_idx, (ax_u, ax_v) in enumerate(PLANE_PAIRS):
                plane = self.planes[r_idx * len(PLANE_PAIRS) + p_idx]
                sample = self._bilinear(plane, coords[:, ax_u], coords[:, ax_v])
                fused = sample if fused is None else fused * sample
            outputs.append(fused)
        return torch.cat(outputs, dim=-1)


class DecoderHeads(nn.Module):
    """Decoders from the fused grid feature to geometry deltas and status logits."""

    def __init__(
        self,
        in_width: int,
        num_states: int,
        hidden: int = 64,
        prototype_dim: int = 6,
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.num_states = num_states
        self.prototype_dim = prototype_dim

        def head(out_width: int) -> DenseNet:
            return DenseNet(
                [in_width, hidden, hidden, out_width],
                zero_init_last=True,
                dtype=dtype,
                generator=generator,
            )

        self.phi_x = head(3)
        self.phi_r = head(4)
        self.phi_s = head(3)
        # The status head decodes a query feature in prototype space; logits
        # are scaled similarities against the K prototypes. Tying the logits
        # to the prototypes lets assignment and prototype content co-adapt,
        # which a free-logit head fails to do within the short status pass.
        self.phi_w = DenseNet(
            [in_width, hidden, hidden, prototype_dim],
            dtype=dtype,
            generator=generator,
        )
        self.status_gain = 25.0


def status_weights_from_features(
    features: torch.Tensor, heads: DecoderHeads, prototypes: torch.Tensor
) -> torch.Tensor:
    """Softmax simplex weights (N, K) from fused grid features.

    The head decodes a query feature q(x, t); logits are the scaled
    similarities gain * <q, S_k> against each state prototype.
    """
    query = heads.phi_w(features)
    if prototypes.shape[-1] != query.shape[-1]:
        raise ValueError(
            f"prototype dim {prototypes.shape[-1]} != status query dim {query.shape[-1]}"
        )
    logits = heads.status_gain * torch.einsum("nd,nkd->nk", query, prototypes)
    return torch.softmax(logits, dim=-1)


def time_varying_feature(prototypes: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Convex combination sum_k w_k S_k; prototypes (N, K, D), weights (N, K)."""
    if prototypes.shape[:2] != weights.shape:
        raise ValueError(
            f"prototype/weight shape mismatch: {tuple(prototypes.shape[:2])} vs "
            f"{tuple(weights.shape)}"
        )
    return torch.einsum("nk,nkd->nd", weights, prototypes)


class IdentityDeformation:
    """No-op deformation; the time-varying feature is the prototype mean."""

    def deform_geometry(self, cloud: GaussianCloud, t: float):
        return cloud.positions, cloud.rotations, cloud.log_scales

    def time_varying_features(self, cloud: GaussianCloud, t: float) -> torch.Tensor:
        return cloud.state_prototypes.mean(dim=1)


class FieldDeformation:
    """HexPlane + decoder heads deformation as used after training."""

    def __init__(self, grid: HexPlaneGrid, heads: DecoderHeads):
        self.grid = grid
        self.heads = heads

    def deform_geometry(self, cloud: GaussianCloud, t: float):
        feats = self.grid.sample(cloud.positions, t)
        delta_x = self.heads.phi_x(feats)
        delta_r = self.heads.phi_r(feats)
        delta_s = self.heads.phi_s(feats)
        for name, delta in (("phi_x", delta_x), ("phi_r", delta_r), ("phi_s", delta_s)):
            if not torch.isfinite(delta).all():
                raise FloatingPointError(f"non-finite output from decoder {name}")
        means = cloud.positions + delta_x
        rots = cloud.rotations + delta_r
        rots = rots / torch.linalg.norm(rots, dim=-1, keepdim=True)
        scales = cloud.log_scales + delta_s
        return means, rots, scales

    def status_weights(self, cloud: GaussianCloud, t: float) -> torch.Tensor:
        feats = self.grid.sample(cloud.positions, t)
        return status_weights_from_features(feats, self.heads, cloud.state_prototypes)

    def time_varying_features(self, cloud: GaussianCloud, t: float) -> torch.Tensor:
        return time_varying_feature(cloud.state_prototypes, self.status_weights(cloud, t))
