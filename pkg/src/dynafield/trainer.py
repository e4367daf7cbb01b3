"""Four-stage training schedule.

Stage 1 fits a static RGB field, stage 2 embeds static semantics with an L1
loss, stage 3 learns the geometry deformation field, and stage 4 first
refines the static semantics under the (frozen) deformation and then
jointly trains the status decoder and the per-Gaussian state prototypes.
Each stage updates only its declared parameter set.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import renderer
from .captions import SupervisionMap, assemble_supervision
from .compressor import (
    AutoencoderPair,
    caption_config,
    static_config,
    train_autoencoder,
)
from .deformation import (
    DecoderHeads,
    HexPlaneGrid,
    status_weights_from_features,
    time_varying_feature,
)
from .numerics import Adam
from .scene import SEMANTIC_LEVELS, GaussianCloud, SceneBundle
from .state import EngineState, TrainConfig

log = logging.getLogger(__name__)

STAGE_NAMES = {1: "static-rgb", 2: "static-semantics", 3: "rgb-deformation", 4: "semantics-4d"}


def semantic_loss(
    rendered: torch.Tensor, target: torch.Tensor, coverage: np.ndarray | torch.Tensor
) -> torch.Tensor:
    """Mean absolute error over supervised pixels only."""
    cov = torch.as_tensor(np.asarray(coverage))
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: rendered {rendered.shape}, target {target.shape}")
    if not bool(cov.any()):
        raise ValueError("no supervised pixels")
    return (rendered - target).abs()[cov].mean()


def fit_compressors(
    bundle: SceneBundle, config: TrainConfig, steps: int | None = None
) -> tuple[AutoencoderPair, AutoencoderPair]:
    """Train the 512->3 and 4096->6 autoencoders on the bundle's embeddings."""
    static_samples = np.stack(list(bundle.static_embeddings.values()))
    caption_samples = np.stack([r.embedding for r in bundle.caption_records])
    kwargs = {"seed": config.seed}
    if steps is not None:
        kwargs["steps"] = steps
    static_ae = train_autoencoder(static_samples, static_config(**kwargs))
    caption_ae = train_autoencoder(caption_samples, caption_config(**kwargs))
    return static_ae, caption_ae


def _latent_targets(
    sup: SupervisionMap, latents: torch.Tensor
) -> tuple[torch.Tensor, np.ndarray]:
    """Dense (H, W, D) latent target image and its coverage mask."""
    height, width = sup.label_map.shape
    dim = latents.shape[1]
    target = torch.zeros((height, width, dim), dtype=latents.dtype)
    cov = sup.coverage
    if cov.any():
        target[torch.as_tensor(cov)] = latents[sup.label_map[cov]]
    return target, cov


@dataclass
class StageResult:
    stage: int
    losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


class FieldTrainer:
    """Owns all mutable training state for one scene bundle."""

    def __init__(
        self,
        bundle: SceneBundle,
        config: TrainConfig,
        init_positions: np.ndarray,
        init_colors: np.ndarray,
        aabb_min: np.ndarray,
        aabb_max: np.ndarray,
        static_ae: AutoencoderPair | None = None,
        caption_ae: AutoencoderPair | None = None,
        checkpoint_dir: str | Path | None = None,
        compressor_steps: int | None = None,
    ):
        config.validate()
        self.bundle = bundle
        self.config = config
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.completed_stage = 0
        self.stage_results: dict[int, StageResult] = {}

        torch_gen = torch.Generator().manual_seed(config.seed)
        n = init_positions.shape[0]
        rotations = torch.zeros((n, 4))
        rotations[:, 0] = 1.0
        # copy so in-place optimizer updates never mutate the caller's arrays
        self.cloud = GaussianCloud(
            positions=torch.from_numpy(np.array(init_positions, dtype=np.float32)),
            rotations=rotations,
            log_scales=torch.full((n, 3), float(np.log(0.08))),
            opacity_logits=torch.full((n,), 1.5),
            colors=torch.from_numpy(np.array(init_colors, dtype=np.float32)),
            static_semantics={lvl: torch.zeros((n, 3)) for lvl in SEMANTIC_LEVELS},
            state_prototypes=torch.randn(
                (n, config.num_states, 6), generator=torch_gen
            )
            * 0.01,
        )
        for tensor in self._cloud_tensors().values():
            tensor.requires_grad_(True)

        self.grid = HexPlaneGrid(
            aabb_min,
            aabb_max,
            resolutions=config.grid_resolutions,
            feature_width=config.grid_feature_width,
            init_scale=config.grid_init_scale,
            generator=torch_gen,
        )
        self.heads = DecoderHeads(
            self.grid.fused_width,
            config.num_states,
            hidden=config.head_hidden,
            generator=torch_gen,
        )
        self.aabb_min = np.asarray(aabb_min, dtype=np.float32)
        self.aabb_max = np.asarray(aabb_max, dtype=np.float32)

        if static_ae is None or caption_ae is None:
            fitted_static, fitted_caption = fit_compressors(
                bundle, config, steps=compressor_steps
            )
            static_ae = static_ae or fitted_static
            caption_ae = caption_ae or fitted_caption
        self.static_ae = static_ae
        self.caption_ae = caption_ae

        self._frame_targets = [
            torch.from_numpy(frame.astype(np.float32) / 255.0) for frame in bundle.frames
        ]
        self._static_targets = self._build_static_targets()
        self._caption_targets = self._build_caption_targets()

    # ------------------------------------------------------------------ setup

    def _cloud_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {
            "positions": self.cloud.positions,
            "rotations": self.cloud.rotations,
            "log_scales": self.cloud.log_scales,
            "opacity_logits": self.cloud.opacity_logits,
            "colors": self.cloud.colors,
            "state_prototypes": self.cloud.state_prototypes,
        }
        for lvl in SEMANTIC_LEVELS:
            tensors[f"semantics.{lvl}"] = self.cloud.static_semantics[lvl]
        return tensors

    def named_parameters(self) -> dict[str, torch.Tensor]:
        params = dict(self._cloud_tensors())
        for name, p in self.grid.named_parameters():
            params[f"grid.{name}"] = p
        for name, p in self.heads.named_parameters():
            params[f"heads.{name}"] = p
        return params

    def _build_static_targets(self):
        """Per frame: (H, W, 9) latent target over the 3 levels + coverage."""
        targets = []
        with torch.no_grad():
            for f in range(self.bundle.num_frames):
                per_level = []
                coverage = None
                for level in SEMANTIC_LEVELS:
                    rows, object_ids = [], []
                    label = None
                    for track in self.bundle.mask_tracks:
                        mask = track.masks.get(f)
                        key = (level, track.object_id, f)
                        if mask is None or not mask.any():
                            continue
                        if key not in self.bundle.static_embeddings:
                            continue
                        if label is None:
                            label = np.full(mask.shape, -1, dtype=np.int32)
                        label[mask] = len(rows)
                        rows.append(self.bundle.static_embeddings[key])
                        object_ids.append(track.object_id)
                    if label is None:
                        height, width = self.bundle.frames[f].shape[:2]
                        label = np.full((height, width), -1, dtype=np.int32)
                        rows_arr = np.zeros((0, 512), dtype=np.float32)
                    else:
                        rows_arr = np.stack(rows).astype(np.float32)
                    latents = (
                        self.static_ae.encode(torch.from_numpy(rows_arr))
                        if rows_arr.shape[0]
                        else torch.zeros((0, 3))
                    )
                    sup = SupervisionMap(f, label, rows_arr, object_ids)
                    target, cov = _latent_targets(sup, latents)
                    per_level.append(target)
                    coverage = cov if coverage is None else (coverage | cov)
                targets.append((torch.cat(per_level, dim=-1), coverage))
        return targets

    def _build_caption_targets(self):
        maps = assemble_supervision(self.bundle, self.bundle.caption_records)
        targets = []
        with torch.no_grad():
            for sup in maps:
                latents = (
                    self.caption_ae.encode(torch.from_numpy(sup.embeddings))
                    if sup.embeddings.shape[0]
                    else torch.zeros((0, 6))
                )
                targets.append(_latent_targets(sup, latents))
        return targets

    # ---------------------------------------------------------------- stages

    def _frame_order(self, stage: int, iterations: int) -> list[int]:
        rng = np.random.default_rng((self.config.seed, stage))
        order: list[int] = []
        t_count = self.bundle.num_frames
        while len(order) < iterations:
            order.extend(rng.permutation(t_count).tolist())
        return order[:iterations]

    def _deformed_geometry(self, t: float, train_deform: bool):
        feats = self.grid.sample(self.cloud.positions, t)
        if not train_deform:
            feats = feats.detach()
        delta_x = self.heads.phi_x(feats)
        delta_r = self.heads.phi_r(feats)
        delta_s = self.heads.phi_s(feats)
        means = self.cloud.positions + delta_x
        rots = self.cloud.rotations + delta_r
        rots = rots / torch.linalg.norm(rots, dim=-1, keepdim=True)
        scales = self.cloud.log_scales + delta_s
        return means, rots, scales

    def _static_payload(self) -> torch.Tensor:
        return torch.cat(
            [self.cloud.static_semantics[lvl] for lvl in SEMANTIC_LEVELS], dim=-1
        )

    def status_weights(self, t: float) -> torch.Tensor:
        feats = self.grid.sample(self.cloud.positions.detach(), t).detach()
        return status_weights_from_features(feats, self.heads, self.cloud.state_prototypes)

    def time_varying_payload(self, t: float) -> torch.Tensor:
        return time_varying_feature(self.cloud.state_prototypes, self.status_weights(t))

    def stage_parameters(self, stage: int, substage: str | None = None) -> dict[str, torch.Tensor]:
        all_params = self.named_parameters()
        if stage == 1:
            return {k: all_params[k] for k in self.config.scene_lrs}
        if stage == 2:
            return {k: v for k, v in all_params.items() if k.startswith("semantics.")}
        if stage == 3:
            return {
                k: v
                for k, v in all_params.items()
                if k.startswith("grid.")
                or k.startswith("heads.phi_x")
                or k.startswith("heads.phi_r")
                or k.startswith("heads.phi_s")
            }
        if stage == 4:
            if substage == "status":
                return {
                    k: v
                    for k, v in all_params.items()
                    if k.startswith("heads.phi_w") or k == "state_prototypes"
                }
            return {k: v for k, v in all_params.items() if k.startswith("semantics.")}
        raise ValueError(f"unknown stage {stage}")

    def _optimizers(self, stage: int, substage: str | None) -> list[Adam]:
        cfg = self.config
        params = self.stage_parameters(stage, substage)
        if stage == 1:
            return [Adam({k: params[k]}, lr=cfg.scene_lrs[k]) for k in params]
        if stage in (2,) or (stage == 4 and substage != "status"):
            return [Adam(params, lr=cfg.lr_semantics)]
        if stage == 3:
            grid = {k: v for k, v in params.items() if k.startswith("grid.")}
            heads = {k: v for k, v in params.items() if k.startswith("heads.")}
            return [
                Adam(grid, lr=cfg.lr_deform * cfg.grid_lr_multiplier),
                Adam(heads, lr=cfg.lr_deform),
            ]
        # stage 4 status pass
        phi_w = {k: v for k, v in params.items() if k.startswith("heads.phi_w")}
        protos = {k: v for k, v in params.items() if k == "state_prototypes"}
        return [Adam(phi_w, lr=cfg.lr_deform), Adam(protos, lr=cfg.lr_prototypes)]

    def _pixel_subset(self, rng: np.random.Generator, coverage: np.ndarray | None):
        """Flat pixel indices for one stochastic iteration (None = full frame).

        For semantic stages half the budget is drawn from supervised pixels
        so sparse masks are never missed entirely.
        """
        width, height = self.bundle.image_size
        total = width * height
        budget = self.config.pixels_per_iteration
        if budget <= 0 or budget >= total:
            return None
        if coverage is None:
            idx = rng.choice(total, size=budget, replace=False)
        else:
            covered = np.flatnonzero(np.asarray(coverage).reshape(-1))
            take = min(covered.size, budget // 2)
            idx = np.concatenate(
                [
                    rng.choice(covered, size=take, replace=False),
                    rng.choice(total, size=budget - take, replace=False),
                ]
            )
            idx = np.unique(idx)
        return torch.from_numpy(np.ascontiguousarray(idx, dtype=np.int64))

    def _render_subset(self, geometry, payload, camera, idx):
        means, rots, scales = geometry
        if idx is None:
            image = renderer.render_arrays(
                means, rots, scales, self.cloud.opacity_logits, payload, camera
            )
            return image.values.reshape(-1, payload.shape[1])
        values, _ = renderer.render_pixels(
            means, rots, scales, self.cloud.opacity_logits, payload, camera, idx
        )
        return values

    def _iteration_loss(
        self,
        stage: int,
        substage: str | None,
        frame: int,
        idx: torch.Tensor | None = None,
    ) -> torch.Tensor:
        camera = self.bundle.cameras[frame]
        cloud = self.cloud
        static_geometry = (cloud.positions, cloud.rotations, cloud.log_scales)
        if stage in (1, 3):
            geometry = (
                static_geometry
                if stage == 1
                else self._deformed_geometry(camera.t, train_deform=True)
            )
            values = self._render_subset(geometry, cloud.colors, camera, idx)
            target = self._frame_targets[frame].reshape(-1, 3)
            if idx is not None:
                target = target[idx]
            return (values - target).abs().mean()
        if stage == 2:
            geometry = static_geometry
            payload = self._static_payload()
            target, cov = self._static_targets[frame]
        else:  # stage 4
            geometry = self._deformed_geometry(camera.t, train_deform=False)
            if substage == "status":
                payload = self.time_varying_payload(camera.t)
                target, cov = self._caption_targets[frame]
            else:
                payload = self._static_payload()
                target, cov = self._static_targets[frame]
        values = self._render_subset(geometry, payload, camera, idx)
        target = target.reshape(-1, payload.shape[1])
        cov = np.asarray(cov).reshape(-1)
        if idx is not None:
            target = target[idx]
            cov = cov[idx.numpy()]
        return semantic_loss(values, target, cov)

    def _iteration_coverage(self, stage: int, substage: str | None, frame: int):
        if stage in (1, 3):
            return None
        if stage == 4 and substage == "status":
            return self._caption_targets[frame][1]
        return self._static_targets[frame][1]

    def _run_pass(self, stage: int, substage: str | None, iterations: int) -> list[float]:
        optimizers = self._optimizers(stage, substage)
        order = self._frame_order(stage if substage != "status" else stage + 10, iterations)
        losses = []
        params = self.stage_parameters(stage, substage)
        pixel_rng = np.random.default_rng(
            (self.config.seed, stage, 0 if substage != "status" else 1, 97)
        )
        for it, frame in enumerate(order):
            for p in params.values():
                p.grad = None
            idx = self._pixel_subset(
                pixel_rng, self._iteration_coverage(stage, substage, frame)
            )
            loss = self._iteration_loss(stage, substage, frame, idx)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at stage {stage} iteration {it}"
                )
            loss.backward()
            for opt in optimizers:
                opt.step()
            losses.append(float(loss.detach()))
        # clear stray gradients on frozen parameters
        for p in self.named_parameters().values():
            p.grad = None
        return losses

    def run_stage(self, stage: int) -> StageResult:
        if stage != self.completed_stage + 1:
            raise RuntimeError(
                f"stage {stage} requested but stage {self.completed_stage + 1} is next"
            )
        iterations = self.config.scaled_iterations(stage)
        log.info("stage %d (%s): %d iterations", stage, STAGE_NAMES[stage], iterations)
        if stage == 4:
            losses = self._run_pass(4, "refine", iterations)
            losses += self._run_pass(4, "status", iterations)
        else:
            losses = self._run_pass(stage, None, iterations)
        self.completed_stage = stage
        result = StageResult(stage=stage, losses=losses)
        self.stage_results[stage] = result
        if self.checkpoint_dir is not None:
            from . import serviceio

            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            serviceio.save_checkpoint(
                self.engine_state(), self.checkpoint_dir / f"stage{stage}.ckpt"
            )
        return result

    def run_all(self) -> dict[int, StageResult]:
        for stage in range(self.completed_stage + 1, 5):
            self.run_stage(stage)
        return self.stage_results

    def engine_state(self) -> EngineState:
        return EngineState(
            cloud=self.cloud,
            grid=self.grid,
            heads=self.heads,
            static_ae=self.static_ae,
            caption_ae=self.caption_ae,
            config=self.config,
            aabb_min=self.aabb_min,
            aabb_max=self.aabb_max,
        )

    def write_loss_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "iteration", "loss"])
            for stage, result in sorted(self.stage_results.items()):
                for i, loss in enumerate(result.losses):
                    writer.writerow([stage, i, f"{loss:.8f}"])
