import pytest
import torch

from dynafield.numerics import Adam, DenseNet, adam_step, check_gradients


class TestDenseNet:
    def test_shapes(self):
        net = DenseNet([4, 8, 2])
        out = net(torch.randn(5, 4))
        assert out.shape == (5, 2)

    def test_zero_init_last_is_zero_map(self):
        net = DenseNet([4, 8, 3], zero_init_last=True)
        x = torch.randn(7, 4)
        assert torch.all(net(x) == 0)

    def test_softmax_head_sums_to_one(self):
        net = DenseNet([4, 8, 3], final_activation="softmax")
        out = net(torch.randn(5, 4))
        assert torch.allclose(out.sum(dim=-1), torch.ones(5), atol=1e-6)
        assert torch.all(out >= 0)

    def test_width_mismatch_faults(self):
        net = DenseNet([4, 2])
        with pytest.raises(ValueError):
            net(torch.randn(3, 5))

    def test_bad_constructor_args(self):
        with pytest.raises(ValueError):
            DenseNet([4])
        with pytest.raises(ValueError):
            DenseNet([4, 2], final_activation="tanh")

    def test_generator_determinism(self):
        a = DenseNet([4, 8, 2], generator=torch.Generator().manual_seed(3))
        b = DenseNet([4, 8, 2], generator=torch.Generator().manual_seed(3))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestAdam:
    def test_matches_torch_adam(self):
        # oracle: torch.optim.Adam on an identical parameter/gradient stream
        torch.manual_seed(0)
        p_ours = torch.randn(6, requires_grad=True)
        p_ref = p_ours.detach().clone().requires_grad_(True)
        ours = Adam({"p": p_ours}, lr=1e-2)
        ref = torch.optim.Adam([p_ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
        for step in range(20):
            g = torch.randn(6, generator=torch.Generator().manual_seed(step))
            p_ours.grad = g.clone()
            p_ref.grad = g.clone()
            ours.step()
            ref.step()
            assert torch.allclose(p_ours, p_ref, atol=1e-6), f"diverged at step {step}"

    def test_non_finite_gradient_faults_with_name(self):
        p = torch.zeros(3, requires_grad=True)
        p.grad = torch.tensor([0.0, float("nan"), 1.0])
        opt = Adam({"theta": p}, lr=1e-3)
        with pytest.raises(FloatingPointError, match="theta"):
            opt.step()

    def test_missing_gradient_leaves_param(self):
        p = torch.ones(3, requires_grad=True)
        opt = Adam({"p": p}, lr=1e-1)
        opt.step()
        assert torch.equal(p, torch.ones(3))

    def test_adam_step_creates_and_reuses_state(self):
        p = torch.ones(2, requires_grad=True)
        p.grad = torch.ones(2)
        state = adam_step({"p": p}, None, lr=1e-2)
        assert state.state["p"]["step"] == 1
        p.grad = torch.ones(2)
        state2 = adam_step({"p": p}, state, lr=1e-2)
        assert state2 is state
        assert state.state["p"]["step"] == 2


class TestCheckGradients:
    def test_accepts_correct_gradients(self):
        w = torch.randn(4, dtype=torch.float64, requires_grad=True)

        def loss():
            return (w**3).sum()

        worst = check_gradients(loss, {"w": w}, num_probes=4, eps=1e-5)
        assert worst < 1e-6

    def test_rejects_wrong_gradients(self):
        w = torch.randn(3, dtype=torch.float64, requires_grad=True)

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x**2).sum()

            @staticmethod
            def backward(ctx, g):
                return g * torch.ones(3, dtype=torch.float64)  # wrong: should be 2x

        def loss():
            return Wrong.apply(w)

        with pytest.raises(AssertionError, match="gradient mismatch"):
            check_gradients(loss, {"w": w}, num_probes=3, eps=1e-5)
