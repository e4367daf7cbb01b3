"""Embedding autoencoders.

Two compressors back the rendered feature payloads: 512-dim static
embeddings down to 3 dims and 4096-dim caption embeddings down to 6 dims,
trained with an L2 reconstruction loss plus a cosine-similarity regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .numerics import Adam, DenseNet

STATIC_WIDTHS = [512, 256, 128, 64, 32, 3]
CAPTION_WIDTHS = [4096, 1024, 256, 64, 6]
COSINE_WEIGHT = 0.1


@dataclass
class AutoencoderConfig:
    widths: list[int]
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    min_samples_factor: int = 10
    augment_noise: float = 0.02


def static_config(**overrides) -> AutoencoderConfig:
    return AutoencoderConfig(widths=list(STATIC_WIDTHS), **overrides)


def caption_config(**overrides) -> AutoencoderConfig:
    # the 4096-wide net is ~50x the static one per step; fewer steps by default
    overrides.setdefault("steps", 400)
    return AutoencoderConfig(widths=list(CAPTION_WIDTHS), **overrides)


@dataclass
class AutoencoderPair:
    encoder: DenseNet
    decoder: DenseNet
    input_dim: int
    latent_dim: int
    final_losses: dict[str, float] = field(default_factory=dict)

    def encode(self, x: torch.Tensor | np.ndarray) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=next(self.encoder.parameters()).dtype)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"encode input dim {x.shape[-1]} != {self.input_dim}")
        return self.encoder(x)

    def decode(self, z: torch.Tensor | np.ndarray) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=next(self.decoder.parameters()).dtype)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"decode input dim {z.shape[-1]} != {self.latent_dim}")
        return self.decoder(z)

    def roundtrip(self, x: torch.Tensor | np.ndarray) -> torch.Tensor:
        return self.decode(self.encode(x))


def make_pair(widths: list[int], seed: int = 0, dtype=torch.float32) -> AutoencoderPair:
    gen = torch.Generator().manual_seed(seed)
    encoder = DenseNet(widths, dtype=dtype, generator=gen)
    decoder = DenseNet(list(reversed(widths)), dtype=dtype, generator=gen)
    return AutoencoderPair(
        encoder=encoder, decoder=decoder, input_dim=widths[0], latent_dim=widths[-1]
    )


def _reconstruction_loss(pair: AutoencoderPair, batch: torch.Tensor) -> torch.Tensor:
    recon = pair.decoder(pair.encoder(batch))
    l2 = ((batch - recon) ** 2).sum(dim=-1).mean()
    cos = torch.nn.functional.cosine_similarity(batch, recon, dim=-1, eps=1e-8).mean()
    return l2 + COSINE_WEIGHT * (1.0 - cos)


def train_autoencoder(samples: np.ndarray, config: AutoencoderConfig) -> AutoencoderPair:
    """Fit a compressor on the samples; deterministic under config.seed.

    If fewer than latent_dim * min_samples_factor samples are supplied the
    set is augmented with seeded jittered copies before training.
    """
    latent_dim = config.widths[-1]
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 2 or samples.shape[1] != config.widths[0]:
        raise ValueError(
            f"samples shape {samples.shape} incompatible with input dim {config.widths[0]}"
        )
    required = latent_dim * config.min_samples_factor
    if samples.shape[0] == 0:
        raise ValueError("no samples to train on")
    if samples.shape[0] < required:
        rng = np.random.default_rng(config.seed + 1)
        copies = [samples]
        while sum(c.shape[0] for c in copies) < required:
            jitter = rng.normal(0.0, config.augment_noise, samples.shape).astype(np.float32)
            noisy = samples + jitter
            noisy /= np.linalg.norm(noisy, axis=-1, keepdims=True)
            copies.append(noisy)
        samples = np.concatenate(copies)

    pair = make_pair(config.widths, seed=config.seed)
    data = torch.from_numpy(samples)
    params = {
        f"encoder.{n}": p for n, p in pair.encoder.named_parameters()
    } | {f"decoder.{n}": p for n, p in pair.decoder.named_parameters()}
    opt = Adam(params, lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)

    n = data.shape[0]
    final = None
    for step in range(config.steps):
        idx = torch.randint(0, n, (min(config.batch_size, n),), generator=gen)
        batch = data[idx]
        opt.zero_grad()
        loss = _reconstruction_loss(pair, batch)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite autoencoder loss at step {step}")
        loss.backward()
        opt.step()
        final = loss
    with torch.no_grad():
        full = _reconstruction_loss(pair, data)
        recon = pair.roundtrip(data)
        cos = torch.nn.functional.cosine_similarity(data, recon, dim=-1).mean()
    pair.final_losses = {
        "last_batch": float(final.detach()) if final is not None else float("nan"),
        "full_loss": float(full),
        "mean_cosine": float(cos),
    }
    return pair
