"""Encoder, decoder, discriminator, auxiliary probe and oracle classifier.

All networks output probabilities (sigmoid heads). The encoder has a shared
convolutional trunk with two heads: ``z`` (mean and log-variance of the
identity code) and ``y`` (attribute probability). The decoder consumes the
identity code with the attribute appended as one extra input unit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from . import synthdata
from .errors import ContractError, NumericFailure, StateError


@dataclass(frozen=True)
class ArchSpec:
    image_size: int = 32
    channels: int = 3
    d_z: int = 16
    width: int = 16
    residual: bool = False
    share_trunk: bool = True
    aux_hidden: int = 64

    def __post_init__(self):
        stages = math.log2(self.image_size / 4) if self.image_size >= 8 else 0
        if self.image_size < 8 or stages != int(stages):
            raise ContractError(f"image_size must be 4 * 2**k with k >= 1, got {self.image_size}")
        if self.d_z < 1 or self.width < 1 or self.aux_hidden < 1:
            raise ContractError("d_z, width and aux_hidden must be positive")

    @property
    def stages(self) -> int:
        return int(math.log2(self.image_size // 4))

    @property
    def top_channels(self) -> int:
        return self.width * 2 ** (self.stages - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class LatentPosterior(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor
    z_hat: torch.Tensor
    y_hat: torch.Tensor
    eps: torch.Tensor

    @property
    def sigma(self):
        return torch.exp(0.5 * self.log_var)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 3, 1, 1),
        )

    def forward(self, x):
        return x + self.body(x)


def conv_trunk(arch: ArchSpec) -> nn.Sequential:
    """Strided conv stack, image_size -> 4x4 feature map, channels doubling per stage."""
    layers = []
    c_in = arch.channels
    for i in range(arch.stages):
        c_out = arch.width * 2**i
        layers += [nn.Conv2d(c_in, c_out, 4, 2, 1), nn.LeakyReLU(0.2)]
        if arch.residual:
            layers.append(ResidualBlock(c_out))
        c_in = c_out
    layers.append(nn.Flatten())
    return nn.Sequential(*layers)


def _run_checked(layers, x, name):
    out = layers(x)
    if not torch.isfinite(out).all():
        h = x
        for i, layer in enumerate(layers):
            h = layer(h)
            if not torch.isfinite(h).all():
                raise NumericFailure(f"non-finite activations in {name} layer {i}", layer=i)
        raise NumericFailure(f"non-finite output of {name}", layer=len(layers) - 1)
    return out


class Encoder(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        feat = arch.top_channels * 16
        self.d_z = arch.d_z
        self.trunk = conv_trunk(arch)
        self.y_trunk = None if arch.share_trunk else conv_trunk(arch)
        self.z_head = nn.Linear(feat, 2 * arch.d_z)
        self.y_head = nn.Linear(feat, 1)

    def heads(self, x):
        h = _run_checked(self.trunk, x, "encoder.trunk")
        hy = h if self.y_trunk is None else _run_checked(self.y_trunk, x, "encoder.y_trunk")
        stats = _run_checked(self.z_head, h, "encoder.z_head")
        y_hat = torch.sigmoid(_run_checked(self.y_head, hy, "encoder.y_head")).squeeze(1)
        return stats[:, : self.d_z], stats[:, self.d_z:], y_hat

    def classify(self, x):
        """E_y alone; skips the identity head."""
        h = self.trunk(x) if self.y_trunk is None else self.y_trunk(x)
        return torch.sigmoid(self.y_head(h)).squeeze(1)


class Decoder(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        top = arch.top_channels
        self.fc = nn.Sequential(nn.Linear(arch.d_z + 1, top * 16), nn.ReLU())
        layers = []
        c_in = top
        for i in range(arch.stages):
            last = i == arch.stages - 1
            if arch.residual:
                layers.append(ResidualBlock(c_in))
            c_out = arch.channels if last else c_in // 2
            layers.append(nn.ConvTranspose2d(c_in, c_out, 4, 2, 1))
            layers.append(nn.Sigmoid() if last else nn.ReLU())
            c_in = c_out
        self.deconv = nn.Sequential(*layers)

    def forward(self, z, y):
        h = self.fc(torch.cat([z, y.reshape(-1, 1).to(z.dtype)], dim=1))
        h = h.view(-1, self.arch.top_channels, 4, 4)
        return _run_checked(self.deconv, h, "decoder")


class Discriminator(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.net = nn.Sequential(conv_trunk(arch), nn.Linear(arch.top_channels * 16, 1))

    def forward(self, x):
        return torch.sigmoid(_run_checked(self.net, x, "discriminator")).squeeze(1)


class Auxiliary(nn.Module):
    """Two-hidden-layer MLP predicting the attribute from the identity code.

    Inputs are standardized with the statistics of the batch itself, so the
    encoder cannot defeat the network by rescaling the code.
    """

    def __init__(self, d_z, hidden=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_z, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )

    def forward(self, z):
        z = (z - z.mean(0)) / torch.sqrt(z.var(0, unbiased=False) + 1e-5)
        return torch.sigmoid(_run_checked(self.net, z, "auxiliary")).squeeze(1)


class OracleClassifier(nn.Module):
    """Attribute classifier trained on real images only, independent of the generative model."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.net = nn.Sequential(conv_trunk(arch), nn.Linear(arch.top_channels * 16, 1))
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    def forward(self, x):
        return torch.sigmoid(self.net(x)).squeeze(1)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled Gaussian weights (std = 1/sqrt(fan_in)), zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, nn.ConvTranspose2d)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                # each output pixel sees in_channels * k*k / stride^2 inputs
                fan_in = w.shape[0] * w.shape[2] * w.shape[3] / (m.stride[0] * m.stride[1])
            else:
                fan_in = w[0].numel()
            with torch.no_grad():
                w.copy_(torch.randn(w.shape, generator=generator, dtype=w.dtype) / math.sqrt(fan_in))
                if m.bias is not None:
                    m.bias.zero_()


NETWORK_NAMES = ("phi", "theta", "chi", "psi")


class NetworkBundle(nn.Module):
    """Encoder (phi), decoder (theta), discriminator (chi) and auxiliary (psi)."""

    def __init__(self, arch: ArchSpec, seed: int = 0):
        super().__init__()
        self.arch = arch
        self.phi = Encoder(arch)
        self.theta = Decoder(arch)
        self.chi = Discriminator(arch)
        self.psi = Auxiliary(arch.d_z, arch.aux_hidden)
        g = torch.Generator().manual_seed(int(seed))
        for name in NETWORK_NAMES:
            init_weights(getattr(self, name), g)

    def network(self, name: str) -> nn.Module:
        if name not in NETWORK_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {name: list(getattr(self, name).parameters()) for name in NETWORK_NAMES}

    def parameter_counts(self) -> dict[str, int]:
        return {k: sum(p.numel() for p in v) for k, v in self.parameter_groups().items()}


def parameter_count(arch: ArchSpec) -> dict[str, int]:
    return NetworkBundle(arch).parameter_counts()


def _as_tensor(x, like: nn.Module):
    dtype = next(like.parameters()).dtype
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    return x.to(dtype)


def _check_images(x, arch: ArchSpec):
    if x.dim() != 4 or tuple(x.shape[1:]) != (arch.channels, arch.image_size, arch.image_size):
        raise ContractError(
            f"expected images (B, {arch.channels}, {arch.image_size}, {arch.image_size}), got {tuple(x.shape)}"
        )
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ContractError("image values must lie in [0, 1]")


def encode(bundle: NetworkBundle, x, noise=None, generator: torch.Generator | None = None) -> LatentPosterior:
    """Reparameterized encoding: z_hat = mu + exp(log_var / 2) * eps.

    ``noise`` fixes eps (shape (B, d_z)); otherwise eps ~ N(0, I) from ``generator``.
    """
    x = _as_tensor(x, bundle.phi)
    _check_images(x, bundle.arch)
    mu, log_var, y_hat = bundle.phi.heads(x)
    if noise is None:
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    else:
        noise = _as_tensor(noise, bundle.phi)
        if tuple(noise.shape) != tuple(mu.shape):
            raise ContractError(f"noise shape {tuple(noise.shape)} != {tuple(mu.shape)}")
    sigma = torch.exp(0.5 * log_var)
    if not torch.isfinite(sigma).all():
        raise NumericFailure("log-variance overflowed", layer=-1)
    return LatentPosterior(mu, log_var, mu + sigma * noise, y_hat, noise)


def decode(bundle: NetworkBundle, z, y) -> torch.Tensor:
    z = _as_tensor(z, bundle.theta)
    if z.dim() != 2 or z.shape[1] != bundle.arch.d_z:
        raise ContractError(f"expected identity codes (B, {bundle.arch.d_z}), got {tuple(z.shape)}")
    y = torch.as_tensor(y, dtype=z.dtype)
    if y.dim() == 0:
        y = y.expand(z.shape[0])
    if y.numel() != z.shape[0]:
        raise ContractError(f"attribute batch of {y.numel()} does not match {z.shape[0]} codes")
    if not (torch.isfinite(z).all() and torch.isfinite(y).all()):
        raise NumericFailure("non-finite decoder input", layer=0)
    return bundle.theta(z, y)


def discriminate(bundle: NetworkBundle, x) -> torch.Tensor:
    x = _as_tensor(x, bundle.chi)
    _check_images(x, bundle.arch)
    return bundle.chi(x)


def aux_predict(bundle: NetworkBundle, z_hat) -> torch.Tensor:
    z_hat = _as_tensor(z_hat, bundle.psi)
    if z_hat.dim() != 2 or z_hat.shape[1] != bundle.arch.d_z:
        raise ContractError(f"expected identity codes (B, {bundle.arch.d_z}), got {tuple(z_hat.shape)}")
    return bundle.psi(z_hat)


class PixelRuleOracle:
    """Exact oracle for synthetic sprites; needs the identity factors of each image."""

    trained = True

    def __call__(self, x, factors):
        x = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
        return synthdata.pixel_rule_labels(x, np.asarray(factors))


def oracle_classify(oracle, x, factors=None, batch_size: int = 512) -> np.ndarray:
    """Hard 0/1 labels from an oracle (0.5 threshold for the learned variant)."""
    if isinstance(oracle, PixelRuleOracle):
        if factors is None:
            raise ContractError("pixel-rule oracle requires the identity factors of each image")
        return oracle(x, factors)
    if not bool(oracle.trained):
        raise StateError("oracle classifier has not been trained")
    x = _as_tensor(x, oracle)
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(oracle(x[i:i + batch_size]) > 0.5)
    if not out:
        return np.zeros(0, dtype=np.uint8)
    return torch.cat(out).numpy().astype(np.uint8)
