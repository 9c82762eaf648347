"""Loss terms and composite objectives.

Sign convention: every BCE here is the negated mean log-likelihood, so all
primitive losses are >= 0 and are minimized. The composites are

    decoder:  rec + beta * class_rec - delta * gan
    encoder:  rec + alpha * kl + beta * class_rec + rho * class_in - delta * gan - aux

where the trailing ``- aux`` is present only in information-factorization mode.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch

from .errors import ConfigurationError, ContractError, NumericFailure
from .models import NetworkBundle, aux_predict, decode, discriminate, encode

EPS = 1e-7


def bce(target, prediction, eps: float = EPS) -> torch.Tensor:
    target = torch.as_tensor(target)
    prediction = torch.as_tensor(prediction)
    if not torch.is_floating_point(prediction):
        prediction = prediction.double()
    target = target.to(prediction.dtype)
    if target.numel() and (target.min() < 0 or target.max() > 1):
        raise ContractError("bce target outside [0, 1]")
    target, prediction = torch.broadcast_tensors(target, prediction)
    p = prediction.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def kl_divergence(mu, log_var) -> torch.Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over latent dims, averaged over the batch."""
    mu = torch.as_tensor(mu)
    log_var = torch.as_tensor(log_var, dtype=mu.dtype)
    if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
        raise NumericFailure("non-finite input to kl_divergence", component="kl")
    if mu.dim() == 1:
        mu, log_var = mu[None], log_var[None]
    per_dim = 0.5 * (mu**2 + torch.exp(log_var) - log_var - 1)
    return per_dim.sum(dim=1).mean()


def gan_loss(c_real, c_rec, c_prior) -> torch.Tensor:
    """Equally weighted BCE of real-vs-ones and both fake sets vs zeros."""
    sizes = {len(c_real), len(c_rec), len(c_prior)}
    if len(sizes) != 1:
        raise ContractError(f"discriminator batches differ in size: {sorted(sizes)}")
    return (bce(1.0, c_real) + bce(0.0, c_rec) + bce(0.0, c_prior)) / 3


def reconstruction_loss(x, x_hat) -> torch.Tensor:
    x = torch.as_tensor(x)
    x_hat = torch.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return bce(x, x_hat)


def _check_coefficients(**coeffs):
    for name, value in coeffs.items():
        if value < 0:
            raise ConfigurationError(f"coefficient {name} must be >= 0, got {value}")


def decoder_loss(rec, class_rec, gan, beta: float, delta: float):
    _check_coefficients(beta=beta, delta=delta)
    return rec + beta * class_rec - delta * gan


def encoder_loss(rec, kl, class_rec, class_in, gan, aux, alpha, beta, rho, delta, include_aux=True):
    """Encoder objective; with ``include_aux`` the encoder maximizes the auxiliary loss."""
    _check_coefficients(alpha=alpha, beta=beta, rho=rho, delta=delta)
    total = rec + alpha * kl + beta * class_rec + rho * class_in - delta * gan
    if include_aux:
        total = total - aux
    return total


@dataclass(frozen=True)
class Weights:
    """Effective coefficients after mode and flag switches are applied."""

    alpha: float
    beta: float
    rho: float
    delta_dec: float
    delta_enc: float
    include_aux: bool

    @classmethod
    def from_config(cls, cfg) -> "Weights":
        return cls(
            alpha=cfg.alpha,
            beta=cfg.beta if cfg.use_class_rec else 0.0,
            rho=cfg.rho,
            delta_dec=cfg.delta,
            delta_enc=cfg.delta if cfg.encoder_gan else 0.0,
            include_aux=cfg.mode == "ifcvae",
        )


@dataclass(frozen=True)
class LossReport:
    rec: float
    kl: float
    class_in: float
    class_rec: float
    gan: float
    aux: float
    enc_total: float
    dec_total: float

    @classmethod
    def from_components(cls, weights: Weights, **c) -> "LossReport":
        c = {k: float(v) for k, v in c.items()}
        dec = decoder_loss(c["rec"], c["class_rec"], c["gan"], weights.beta, weights.delta_dec)
        enc = encoder_loss(
            c["rec"], c["kl"], c["class_rec"], c["class_in"], c["gan"], c["aux"],
            weights.alpha, weights.beta, weights.rho, weights.delta_enc, weights.include_aux,
        )
        return cls(enc_total=enc, dec_total=dec, **c)

    def to_dict(self) -> dict:
        return asdict(self)


class ForwardPass(NamedTuple):
    posterior: object
    x_hat: torch.Tensor
    x_prior: torch.Tensor
    terms: dict


COMPONENTS = ("rec", "kl", "class_in", "class_rec", "gan", "aux")


def forward_pass(bundle: NetworkBundle, x, y, eps, z_prior, y_prior=None, class_rec: bool = True,
                 kl_reduction: str = "sum") -> ForwardPass:
    """One shared forward pass through all four networks.

    Returns every primitive loss as a tensor. ``y_prior`` is the attribute fed to
    the decoder for prior samples (defaults to ``y``). With ``class_rec=False``
    the reconstruction's re-encoded label loss is evaluated without a graph.
    ``kl_reduction="mean"`` divides the KL by the latent width, putting it on
    the same per-unit footing as the pixel-mean reconstruction loss.
    """
    y = torch.as_tensor(y).to(next(bundle.parameters()).dtype)
    post = encode(bundle, x, noise=eps)
    x_hat = decode(bundle, post.z_hat, post.y_hat)
    x_prior = decode(bundle, z_prior, y if y_prior is None else y_prior)
    x_in = post.mu.new_tensor(x) if not isinstance(x, torch.Tensor) else x.to(post.mu.dtype)
    if class_rec:
        y_hat_hat = bundle.phi.classify(x_hat)
    else:
        with torch.no_grad():
            y_hat_hat = bundle.phi.classify(x_hat)
    c_real = discriminate(bundle, x_in)
    c_rec = discriminate(bundle, x_hat)
    c_prior = discriminate(bundle, x_prior)
    y_tilde = aux_predict(bundle, post.z_hat)
    terms = {
        "rec": reconstruction_loss(x_in, x_hat),
        "kl": kl_divergence(post.mu, post.log_var) / (post.mu.shape[1] if kl_reduction == "mean" else 1),
        "class_in": bce(y, post.y_hat),
        "class_rec": bce(y, y_hat_hat),
        "gan": gan_loss(c_real, c_rec, c_prior),
        "aux": bce(y, y_tilde),
    }
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NumericFailure(f"non-finite loss component {name}", component=name)
    return ForwardPass(post, x_hat, x_prior, terms)


def objectives(terms: dict, weights: Weights) -> dict:
    """Per-network scalar objectives, each to be minimized by its own parameter set."""
    t = terms
    return {
        "theta": decoder_loss(t["rec"], t["class_rec"], t["gan"], weights.beta, weights.delta_dec),
        "phi": encoder_loss(
            t["rec"], t["kl"], t["class_rec"], t["class_in"], t["gan"], t["aux"],
            weights.alpha, weights.beta, weights.rho, weights.delta_enc, weights.include_aux,
        ),
        "chi": t["gan"],
        "psi": t["aux"],
    }
