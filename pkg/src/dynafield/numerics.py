"""Differentiable-computation substrate.

Dense tensors and reverse-mode gradients are delegated to torch (CPU only);
this module adds the small pieces the engine needs on top: a feed-forward
network, a functional Adam optimizer with non-finite gradient detection, and
a central finite-difference gradient checker used as the independent oracle
for every differentiable operation in the engine.
"""

from __future__ import annotations

import math

import torch
from torch import nn

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DenseNet(nn.Module):
    """Small MLP: ReLU hidden layers, identity or softmax head.

    With ``zero_init_last`` the final linear layer starts at zero so the
    network is an exact zero map at initialization (deformation decoders
    must start as the identity deformation).
    """

    def __init__(
        self,
        widths: list[int],
        final_activation: str = "identity",
        zero_init_last: bool = False,
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("DenseNet needs at least input and output widths")
        if final_activation not in ("identity", "softmax"):
            raise ValueError(f"unknown final activation '{final_activation}'")
        self.widths = list(widths)
        self.final_activation = final_activation
        layers = []
        for i in range(len(widths) - 1):
            layer = nn.Linear(widths[i], widths[i + 1], dtype=dtype)
            bound = 1.0 / math.sqrt(widths[i])
            with torch.no_grad():
                layer.weight.copy_(
                    (torch.rand(layer.weight.shape, generator=generator, dtype=dtype) * 2 - 1)
                    * bound
                )
                layer.bias.zero_()
            layers.append(layer)
        if zero_init_last:
            with torch.no_grad():
                layers[-1].weight.zero_()
                layers[-1].bias.zero_()
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {x.shape[-1]} != expected {self.widths[0]}")
        for layer in self.layers[:-1]:
            x = torch.relu(layer(x))
        x = self.layers[-1](x)
        if self.final_activation == "softmax":
            x = torch.softmax(x, dim=-1)
        return x


class Adam:
    """Functional Adam over a name -> tensor parameter dict.

    Faults with the parameter name on any non-finite gradient; parameters
    with no gradient are left untouched.
    """

    def __init__(self, params: dict[str, torch.Tensor], lr: float):
        self.params = dict(params)
        self.lr = lr
        self.state = {
            name: {
                "step": 0,
                "m": torch.zeros_like(p),
                "v": torch.zeros_like(p),
            }
            for name, p in self.params.items()
        }

    @torch.no_grad()
    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            grad = p.grad
            if not torch.isfinite(grad).all():
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
            st = self.state[name]
            st["step"] += 1
            st["m"].mul_(ADAM_BETA1).add_(grad, alpha=1 - ADAM_BETA1)
            st["v"].mul_(ADAM_BETA2).addcmul_(grad, grad, value=1 - ADAM_BETA2)
            bias1 = 1 - ADAM_BETA1 ** st["step"]
            bias2 = 1 - ADAM_BETA2 ** st["step"]
            m_hat = st["m"] / bias1
            v_hat = st["v"] / bias2
            p.add_(-self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS))

    def zero_grad(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.grad = None


def adam_step(params: dict[str, torch.Tensor], state: Adam | None, lr: float) -> Adam:
    """One Adam update using gradients already stored on the parameters."""
    if state is None:
        state = Adam(params, lr)
    state.lr = lr
    state.step()
    return state


def check_gradients(
    loss_fn,
    named_params: dict[str, torch.Tensor],
    num_probes: int = 100,
    eps: float = 1e-4,
    rtol: float = 1e-3,
    generator: torch.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` is re-evaluated from scratch for each probe, so it must be
    pure. Probes are drawn uniformly over all coordinates of all listed
    parameters. Returns the worst relative error; raises AssertionError if
    any probe exceeds ``rtol``.
    """
    for p in named_params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: p.grad.detach().clone() for name, p in named_params.items()}

    flat_index = []
    for name, p in named_params.items():
        flat_index.extend((name, i) for i in range(p.numel()))
    perm = torch.randperm(len(flat_index), generator=generator).tolist()
    probes = [flat_index[i] for i in perm[: min(num_probes, len(flat_index))]]

    worst = 0.0
    with torch.no_grad():
        for name, i in probes:
            p = named_params[name]
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = float(loss_fn())
            flat[i] = orig - eps
            minus = float(loss_fn())
            flat[i] = orig
            fd = (plus - minus) / (2 * eps)
            ana = float(analytic[name].view(-1)[i])
            denom = max(abs(fd), abs(ana), 1e-4)
            rel = abs(fd - ana) / denom
            worst = max(worst, rel)
            if rel > rtol:
                raise AssertionError(
                    f"gradient mismatch at {name}[{i}]: analytic {ana:.6g}, "
                    f"finite-difference {fd:.6g}, rel err {rel:.3g} > {rtol}"
                )
    return worst
