"""Training loop: one shared forward pass, then four RMSprop updates per batch.

Update order per batch is decoder (theta), encoder (phi), discriminator (chi),
auxiliary (psi). All four gradients are taken from the same forward pass
before any parameter moves.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .errors import ContractError, FormatError, NumericFailure, StateError
from .losses import COMPONENTS, LossReport, Weights, bce, forward_pass, objectives
from .models import NETWORK_NAMES, ArchSpec, NetworkBundle, encode
from .synthdata import Dataset

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "factorkit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class OptimizerState:
    """Running squared-gradient accumulators (and momentum buffers where enabled) per network."""

    acc: dict[str, list[torch.Tensor]]
    buf: dict[str, list[torch.Tensor] | None]
    step: int = 0
    # recent (codes, labels) for the extra auxiliary steps; cleared every epoch, never saved
    replay: list = field(default_factory=list, repr=False)

    @classmethod
    def for_bundle(cls, bundle: NetworkBundle, momentum_networks=("chi",)) -> "OptimizerState":
        groups = bundle.parameter_groups()
        acc = {k: [torch.zeros_like(p) for p in ps] for k, ps in groups.items()}
        buf = {k: ([torch.zeros_like(p) for p in ps] if k in momentum_networks else None) for k, ps in groups.items()}
        return cls(acc, buf)

    def state_dict(self) -> dict:
        return {"acc": self.acc, "buf": self.buf, "step": self.step}

    @classmethod
    def from_state_dict(cls, d: dict) -> "OptimizerState":
        return cls(d["acc"], d["buf"], int(d["step"]))


def rmsprop_update(params, grads, acc, lr, decay=0.9, eps=1e-8, momentum=0.0, buf=None):
    """In-place RMSprop step.

    acc <- decay * acc + (1 - decay) * g**2
    step = g / sqrt(acc + eps); with a momentum buffer: buf <- momentum * buf + step
    p <- p - lr * step (or buf)
    """
    if len(params) != len(grads) or len(params) != len(acc):
        raise ContractError("params, grads and accumulators differ in length")
    with torch.no_grad():
        for i, (p, g, a) in enumerate(zip(params, grads, acc)):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape or a.shape != p.shape:
                raise ContractError(f"shape mismatch at parameter {i}: {tuple(p.shape)} vs {tuple(g.shape)}")
            if not torch.isfinite(g).all():
                raise NumericFailure(f"non-finite gradient at parameter {i}")
            a.mul_(decay).addcmul_(g, g, value=1 - decay)
            step = g / torch.sqrt(a + eps)
            if buf is not None:
                buf[i].mul_(momentum).add_(step)
                step = buf[i]
            p.sub_(lr * step)
    return params


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    # per-epoch stream so resuming at any epoch boundary replays identically
    s = np.random.SeedSequence([int(seed), int(epoch)]).generate_state(2, dtype=np.uint64)
    return torch.Generator().manual_seed(int(s[0] >> np.uint64(1)))


def _named_generator(seed: int, tag: int) -> torch.Generator:
    s = np.random.SeedSequence([int(seed), 2**31 - 1, tag]).generate_state(1, dtype=np.uint64)
    return torch.Generator().manual_seed(int(s[0] >> np.uint64(1)))


def train_step(bundle: NetworkBundle, opt_state: OptimizerState, batch, z_prior, config: ExperimentConfig,
               eps=None, generator=None, alpha=None):
    """Apply one update to each of theta, phi, chi and psi; return (bundle, opt_state, LossReport).

    ``alpha`` overrides the config's KL coefficient (used by the warm-up schedule).
    """
    x, y = batch
    dtype = next(bundle.parameters()).dtype
    x = torch.as_tensor(x).to(dtype)
    y = torch.as_tensor(y).to(dtype)
    z_prior = torch.as_tensor(z_prior).to(dtype)
    if len(x) != len(y) or z_prior.shape != (len(x), bundle.arch.d_z):
        raise ContractError(
            f"batch of {len(x)} images, {len(y)} labels and prior noise {tuple(z_prior.shape)} do not match"
        )
    if eps is None:
        eps = torch.randn((len(x), bundle.arch.d_z), generator=generator, dtype=dtype)
    weights = Weights.from_config(config)
    if alpha is not None:
        weights = dataclasses.replace(weights, alpha=float(alpha))
    try:
        fp = forward_pass(bundle, x, y, eps, z_prior, class_rec=weights.beta > 0, kl_reduction=config.kl_reduction)
    except NumericFailure as exc:
        exc.step = opt_state.step
        raise
    obj = objectives(fp.terms, weights)
    groups = bundle.parameter_groups()
    grads = {
        name: torch.autograd.grad(obj[name], groups[name], retain_graph=True, allow_unused=True)
        for name in NETWORK_NAMES
    }
    report = LossReport.from_components(weights, **{k: fp.terms[k].item() for k in COMPONENTS})
    for name in NETWORK_NAMES:
        lr = config.learning_rate * (config.aux_lr_scale if name == "psi" else 1.0)
        try:
            rmsprop_update(
                groups[name], grads[name], opt_state.acc[name], lr,
                config.rms_decay, config.rms_eps, config.momentum, opt_state.buf[name],
            )
        except NumericFailure as exc:
            exc.step, exc.component = opt_state.step, name
            raise
    if config.aux_steps > 1:
        # extra auxiliary steps see the codes of the freshly updated encoder,
        # pooled with those of the last aux_replay - 1 batches
        with torch.no_grad():
            opt_state.replay.append((encode(bundle, x, noise=eps).z_hat, y))
        del opt_state.replay[:-config.aux_replay]
        z_pool = torch.cat([z for z, _ in opt_state.replay])
        y_pool = torch.cat([t for _, t in opt_state.replay])
        for _ in range(config.aux_steps - 1):
            loss = bce(y_pool, bundle.psi(z_pool))
            g = torch.autograd.grad(loss, groups["psi"])
            rmsprop_update(groups["psi"], g, opt_state.acc["psi"], config.learning_rate * config.aux_lr_scale,
                           config.rms_decay, config.rms_eps)
    opt_state.step += 1
    return bundle, opt_state, report


def validation_report(bundle: NetworkBundle, x, y, config: ExperimentConfig, batch_size: int = 500) -> LossReport:
    """Loss components on held-out data with fixed seeded noise, averaged over batches."""
    weights = Weights.from_config(config)
    dtype = next(bundle.parameters()).dtype
    g = _named_generator(config.seed, 1)
    x = torch.as_tensor(x).to(dtype)
    y = torch.as_tensor(y).to(dtype)
    sums = dict.fromkeys(COMPONENTS, 0.0)
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb, yb = x[i:i + batch_size], y[i:i + batch_size]
            eps = torch.randn((len(xb), bundle.arch.d_z), generator=g, dtype=dtype)
            zp = torch.randn((len(xb), bundle.arch.d_z), generator=g, dtype=dtype)
            fp = forward_pass(bundle, xb, yb, eps, zp, kl_reduction=config.kl_reduction)
            for k in COMPONENTS:
                sums[k] += fp.terms[k].item() * len(xb)
    return LossReport.from_components(weights, **{k: v / len(x) for k, v in sums.items()})


def save_checkpoint(path, bundle: NetworkBundle, opt_state: OptimizerState, config: ExperimentConfig, epoch: int) -> Path:
    """Atomic write: the previous file at ``path`` survives a failed write."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": bundle.arch.to_dict(),
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "epoch": int(epoch),
        "networks": {name: bundle.network(name).state_dict() for name in NETWORK_NAMES},
        "optimizer": opt_state.state_dict(),
        "rng": {"scheme": "seedsequence-per-epoch", "seed": int(config.seed), "next_epoch": int(epoch)},
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError:
        if tmp.exists():
            tmp.unlink()
        raise
    return path


@dataclass
class Checkpoint:
    bundle: NetworkBundle
    opt_state: OptimizerState
    config: ExperimentConfig
    epoch: int
    config_hash: str


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = torch.load(path, weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}", field="container") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a factorkit checkpoint", field="format")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {payload.get('version')}", field="version")
    config = ExperimentConfig.from_dict(payload["config"])
    arch = ArchSpec(**payload["arch"])
    bundle = NetworkBundle(arch)
    first = payload["networks"]["phi"]
    bundle.to(next(iter(first.values())).dtype)
    for name in NETWORK_NAMES:
        bundle.network(name).load_state_dict(payload["networks"][name])
    opt_state = OptimizerState.from_state_dict(payload["optimizer"])
    bundle.ready = True
    return Checkpoint(bundle, opt_state, config, int(payload["epoch"]), payload["config_hash"])


@dataclass
class TrainResult:
    bundle: NetworkBundle
    opt_state: OptimizerState
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _record(kind, epoch, step, report: LossReport) -> dict:
    return {"kind": kind, "epoch": epoch, "step": step, **report.to_dict()}


def train(dataset: Dataset, config: ExperimentConfig, out_dir=None, resume_from=None, progress=None) -> TrainResult:
    """Run ``config.epochs`` epochs of shuffled mini-batches over the train split.

    Metrics (one record per step, plus one validation record per epoch) are
    returned and, if ``out_dir`` is given, appended to ``metrics.jsonl``
    there. Checkpoints are written every ``checkpoint_every`` epochs and at the end.
    """
    x_train, y_train = dataset.split("train")
    if len(x_train) == 0:
        raise ContractError("dataset has no train split")
    x_val, y_val = dataset.split("val")
    _, c, h, _ = dataset.images.shape

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.config_hash != config.hash():
            raise StateError("checkpoint was written by a different config")
        bundle, opt_state, start = ck.bundle, ck.opt_state, ck.epoch
    else:
        bundle = NetworkBundle(config.arch(h, c), seed=config.seed)
        opt_state = OptimizerState.for_bundle(bundle)
        start = 0

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "a" if resume_from is not None else "w")
    bundle.ready = True
    result = TrainResult(bundle, opt_state)
    xt = torch.from_numpy(np.ascontiguousarray(x_train))
    yt = torch.from_numpy(y_train.astype(np.float32))
    try:
        for epoch in range(start, config.epochs):
            g = _epoch_generator(config.seed, epoch)
            opt_state.replay.clear()
            perm = torch.randperm(len(xt), generator=g)
            for i in range(0, len(perm), config.batch_size):
                idx = perm[i:i + config.batch_size]
                eps = torch.randn((len(idx), config.d_z), generator=g)
                z_prior = torch.randn((len(idx), config.d_z), generator=g)
                _, _, report = train_step(
                    bundle, opt_state, (xt[idx], yt[idx]), z_prior, config, eps=eps, alpha=config.alpha_at(epoch)
                )
                rec = _record("train", epoch + 1, opt_state.step, report)
                result.metrics.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
            if len(x_val):
                rec = _record("val", epoch + 1, opt_state.step, validation_report(bundle, x_val, y_val, config))
                result.metrics.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
            if progress:
                progress(epoch + 1, result.metrics[-1])
            done = epoch + 1
            if out is not None and (done % config.checkpoint_every == 0 or done == config.epochs):
                path = out / f"checkpoint_epoch{done:03d}.pt"
                save_checkpoint(path, bundle, opt_state, config, done)
                save_checkpoint(out / "checkpoint_last.pt", bundle, opt_state, config, done)
                result.checkpoints.append(path)
        if out is not None and config.epochs == start and not result.checkpoints:
            path = save_checkpoint(out / "checkpoint_last.pt", bundle, opt_state, config, start)
            result.checkpoints.append(path)
    finally:
        if log_fh:
            log_fh.close()
    return result
