"""Independent reference computations shared by the unit and acceptance tests."""

import math

import numpy as np
import torch

from factorkit.losses import Weights, decoder_loss, encoder_loss, forward_pass

LOSS_NAMES = ("rec", "kl", "class_in", "class_rec", "gan", "aux", "enc", "dec")
GRAD_WEIGHTS = Weights(alpha=0.3, beta=0.2, rho=0.4, delta_dec=0.5, delta_enc=0.5, include_aux=True)


def mc_kl(mu, log_var, n, rng):
    """Monte-Carlo KL(q || p) = E_q[log q(z) - log p(z)], summed over independent dims."""
    sigma = np.exp(0.5 * log_var)
    z = mu + sigma * rng.standard_normal((n, len(mu)))
    log_q = -0.5 * (((z - mu) / sigma) ** 2 + log_var + math.log(2 * math.pi))
    log_p = -0.5 * (z**2 + math.log(2 * math.pi))
    return float((log_q - log_p).sum(axis=1).mean())


def all_losses(bundle, batch, weights=GRAD_WEIGHTS):
    x, y, eps, zp = batch
    t = forward_pass(bundle, x, y, eps, zp, class_rec=True).terms
    w = weights
    out = dict(t)
    out["enc"] = encoder_loss(t["rec"], t["kl"], t["class_rec"], t["class_in"], t["gan"], t["aux"],
                              w.alpha, w.beta, w.rho, w.delta_enc, w.include_aux)
    out["dec"] = decoder_loss(t["rec"], t["class_rec"], t["gan"], w.beta, w.delta_dec)
    return out


def gradient_check(bundle, batch, h=1e-5, floor=1e-8):
    """Per loss: fraction of parameter entries whose analytic and central-difference gradients agree.

    Relative error is |a - n| / max(|a|, |n|, floor); entries where both are
    below ``floor`` in magnitude count as agreeing (both are zero to working precision).
    """
    params = list(bundle.parameters())
    losses = all_losses(bundle, batch)
    analytic = {}
    for name in LOSS_NAMES:
        g = torch.autograd.grad(losses[name], params, retain_graph=True, allow_unused=True)
        analytic[name] = torch.cat([(gi if gi is not None else torch.zeros_like(p)).reshape(-1)
                                    for gi, p in zip(g, params)])
    numeric = {name: torch.zeros_like(analytic[name]) for name in LOSS_NAMES}
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = all_losses(bundle, batch)
                flat[i] = orig - h
                down = all_losses(bundle, batch)
                flat[i] = orig
                for name in LOSS_NAMES:
                    numeric[name][k] = (up[name] - down[name]) / (2 * h)
                k += 1
    result = {}
    for name in LOSS_NAMES:
        a, n = analytic[name], numeric[name]
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=a.dtype))
        rel = (a - n).abs() / denom
        result[name] = float((rel < 1e-4).double().mean())
    return result


def gradcheck_batch(n=6, seed=0):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.uniform(0.05, 0.95, (n, 1, 8, 8)))
    y = torch.from_numpy((np.arange(n) % 2).astype(np.float64))
    eps = torch.from_numpy(rng.standard_normal((n, 4)))
    zp = torch.from_numpy(rng.standard_normal((n, 4)))
    return x, y, eps, zp
