import numpy as np
import pytest
import torch

from dynafield.state import DEFAULT_STAGE_ITERATIONS, LR_DEFORM, LR_PROTOTYPES, TrainConfig
from dynafield.trainer import FieldTrainer, semantic_loss


def make_trainer(scene, iterations=(2, 2, 2, 2), **cfg_kwargs):
    cfg_kwargs.setdefault("pixels_per_iteration", 256)
    config = TrainConfig(
        stage_iterations=iterations,
        grid_resolutions=(4, 8),
        grid_feature_width=4,
        **cfg_kwargs,
    )
    return FieldTrainer(
        scene.bundle,
        config,
        scene.init_positions,
        scene.init_colors,
        scene.aabb_min,
        scene.aabb_max,
        compressor_steps=5,
    )


def snapshot(trainer):
    return {k: v.detach().clone() for k, v in trainer.named_parameters().items()}


class TestConfig:
    def test_pinned_defaults(self):
        cfg = TrainConfig()
        assert cfg.stage_iterations == DEFAULT_STAGE_ITERATIONS == (3000, 1000, 10000, 10000)
        assert cfg.lr_deform == LR_DEFORM == 1.6e-4
        assert cfg.lr_prototypes == LR_PROTOTYPES == 2.5e-3
        assert cfg.num_states == 3

    def test_scaled_iterations(self):
        cfg = TrainConfig(iteration_scale=0.1)
        assert cfg.scaled_iterations(1) == 300
        assert cfg.scaled_iterations(4) == 1000
        tiny = TrainConfig(iteration_scale=1e-9)
        assert tiny.scaled_iterations(1) == 1  # never zero

    def test_validate_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(stage_iterations=(0, 1, 1, 1)).validate()
        with pytest.raises(ValueError):
            TrainConfig(lr_deform=-1).validate()
        with pytest.raises(ValueError):
            TrainConfig(num_states=0).validate()


class TestSemanticLoss:
    def test_masked_mean(self):
        rendered = torch.ones((2, 2, 3))
        target = torch.zeros((2, 2, 3))
        cov = np.array([[True, False], [False, False]])
        assert float(semantic_loss(rendered, target, cov)) == pytest.approx(1.0)

    def test_no_coverage_faults(self):
        with pytest.raises(ValueError, match="no supervised"):
            semantic_loss(torch.ones((2, 2, 3)), torch.ones((2, 2, 3)), np.zeros((2, 2), bool))

    def test_shape_mismatch_faults(self):
        with pytest.raises(ValueError):
            semantic_loss(torch.ones((2, 2, 3)), torch.ones((2, 2, 4)), np.ones((2, 2), bool))


class TestStageIsolation:
    def test_stage_order_enforced(self, tiny_scene):
        trainer = make_trainer(tiny_scene)
        with pytest.raises(RuntimeError, match="stage 1"):
            trainer.run_stage(2)

    def test_prototype_init_scale(self, tiny_scene):
        trainer = make_trainer(tiny_scene)
        std = float(trainer.cloud.state_prototypes.detach().std())
        assert 0.005 < std < 0.02  # N(0, 0.01^2)

    def test_each_stage_touches_only_its_parameters(self, tiny_scene):
        trainer = make_trainer(tiny_scene)
        expected_prefixes = {
            1: ("positions", "rotations", "log_scales", "opacity_logits", "colors"),
            2: ("semantics.",),
            3: ("grid.", "heads.phi_x", "heads.phi_r", "heads.phi_s"),
            4: ("semantics.", "heads.phi_w", "state_prototypes"),
        }
        for stage in (1, 2, 3, 4):
            before = snapshot(trainer)
            trainer.run_stage(stage)
            after = snapshot(trainer)
            changed = {k for k in before if not torch.equal(before[k], after[k])}
            allowed = expected_prefixes[stage]
            for name in changed:
                assert any(name.startswith(p) for p in allowed), (
                    f"stage {stage} modified frozen parameter {name}"
                )
            assert changed, f"stage {stage} changed nothing"

    def test_losses_recorded_per_iteration(self, tiny_scene):
        trainer = make_trainer(tiny_scene, iterations=(3, 2, 2, 2))
        results = trainer.run_all()
        assert len(results[1].losses) == 3
        assert len(results[2].losses) == 2
        # stage 4 = refine pass + status pass
        assert len(results[4].losses) == 4
        assert all(np.isfinite(r.final_loss) for r in results.values())

    def test_loss_csv(self, tiny_scene, tmp_path):
        trainer = make_trainer(tiny_scene)
        trainer.run_all()
        path = tmp_path / "losses.csv"
        trainer.write_loss_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "stage,iteration,loss"
        assert len(lines) == 1 + 2 + 2 + 2 + 4


class TestDeterminism:
    def test_same_seed_same_losses(self, tiny_scene):
        a = make_trainer(tiny_scene, seed=5)
        b = make_trainer(tiny_scene, seed=5)
        ra = a.run_all()
        rb = b.run_all()
        for stage in (1, 2, 3, 4):
            assert ra[stage].losses == rb[stage].losses

    def test_status_weights_on_simplex_after_training(self, tiny_scene):
        trainer = make_trainer(tiny_scene)
        trainer.run_all()
        for t in (0.0, 0.5, 1.0):
            w = trainer.status_weights(t)
            assert torch.all(w >= 0)
            assert torch.allclose(w.sum(dim=-1), torch.ones(w.shape[0]), atol=1e-6)


class TestPixelSubset:
    def test_budget_and_semantic_coverage_mix(self, tiny_scene):
        trainer = make_trainer(tiny_scene)
        rng = np.random.default_rng(0)
        idx = trainer._pixel_subset(rng, None)
        assert idx.shape[0] == 256
        assert len(set(idx.tolist())) == 256
        cov = np.zeros((48, 48), dtype=bool)
        cov[:2, :3] = True  # 6 covered pixels
        idx2 = trainer._pixel_subset(rng, cov)
        covered = np.flatnonzero(cov.reshape(-1))
        assert set(covered).issubset(set(idx2.tolist()))

    def test_zero_budget_means_full_frame(self, tiny_scene):
        trainer = make_trainer(tiny_scene, pixels_per_iteration=0)
        assert trainer._pixel_subset(np.random.default_rng(0), None) is None
