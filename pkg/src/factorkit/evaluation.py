"""Metrics, attribute editing, ablation grids and image-grid rendering.

Every evaluation pass uses the posterior mean as the identity code (eps = 0),
so edits and metrics are deterministic functions of (checkpoint, data).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .config import ExperimentConfig
from .errors import ContractError, FactorkitError, StateError
from .models import ArchSpec, Auxiliary, NetworkBundle, OracleClassifier, PixelRuleOracle, decode, oracle_classify
from .synthdata import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    c_attr0: float
    c_attr1: float
    enc_cls_acc: float
    aux_probe_acc: float
    n_eval: int

    def __post_init__(self):
        for k in ("c_attr0", "c_attr1", "enc_cls_acc", "aux_probe_acc"):
            v = getattr(self, k)
            if not (0.0 <= v <= 1.0 or math.isnan(v)):
                raise ContractError(f"{k}={v} outside [0, 1]")
        if self.mse < 0:
            raise ContractError("mse must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _tensor(x, dtype=torch.float32):
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    return x.to(dtype)


def _dtype(bundle):
    return next(bundle.parameters()).dtype


def _require_ready(bundle):
    if not getattr(bundle, "ready", False):
        raise StateError("bundle has not been trained or loaded from a checkpoint")


def _batched(fn, x, batch_size=500):
    with torch.no_grad():
        return torch.cat([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def identity_codes(bundle: NetworkBundle, x, generator: torch.Generator | None = None) -> torch.Tensor:
    """Posterior means of the identity code, or reparameterized samples if a generator is given."""
    x = _tensor(x, _dtype(bundle))
    if generator is None:
        return _batched(lambda b: bundle.phi.heads(b)[0], x)

    def sample(b):
        mu, log_var, _ = bundle.phi.heads(b)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + torch.exp(0.5 * log_var) * eps

    return _batched(sample, x)


def encoder_predictions(bundle: NetworkBundle, x) -> torch.Tensor:
    x = _tensor(x, _dtype(bundle))
    return _batched(bundle.phi.classify, x)


def edit_attribute(bundle: NetworkBundle, x, target: int) -> torch.Tensor:
    """Decode each image's identity code with the attribute unit forced to ``target``."""
    _require_ready(bundle)
    if target not in (0, 1):
        raise ContractError(f"target must be 0 or 1, got {target}")
    z = identity_codes(bundle, x)
    return _batched(lambda b: decode(bundle, b, float(target)), z)


def reconstruct(bundle: NetworkBundle, x) -> torch.Tensor:
    """Decode with the encoder's own attribute prediction and eps = 0."""
    x = _tensor(x, _dtype(bundle))

    def run(b):
        mu, _, y_hat = bundle.phi.heads(b)
        return decode(bundle, mu, y_hat)

    return _batched(run, x)


def mse(x, x_hat) -> float:
    x, x_hat = _tensor(x, torch.float64), _tensor(x_hat, torch.float64)
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.numel() == 0:
        raise ContractError("empty evaluation set")
    return float(((x - x_hat) ** 2).mean())


def reconstruction_mse(bundle: NetworkBundle, x) -> float:
    if len(x) == 0:
        raise ContractError("empty evaluation set")
    return mse(x, reconstruct(bundle, x))


def edit_success_rates(bundle: NetworkBundle, x, oracle, factors=None) -> tuple[float, float]:
    """(c_attr0, c_attr1): fraction of edits to 0 judged 0 and of edits to 1 judged 1.

    ``x`` should hold attribute-present source images; both targets use the same sources.
    """
    if len(x) == 0:
        raise ContractError("no attribute-present source images to edit")
    to0 = edit_attribute(bundle, x, 0)
    to1 = edit_attribute(bundle, x, 1)
    pred0 = oracle_classify(oracle, to0.float(), factors)
    pred1 = oracle_classify(oracle, to1.float(), factors)
    return float((pred0 == 0).mean()), float((pred1 == 1).mean())


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred).astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    return float((pred == labels).mean())


def classifier_accuracy(bundle: NetworkBundle, x, y) -> float:
    """Accuracy of the encoder's attribute head used directly as a classifier."""
    return accuracy((encoder_predictions(bundle, x) > 0.5).numpy(), y)


# --- learned binary classifiers (oracle and post-hoc probe) -----------------


def _fit_binary(model: nn.Module, x_tr, y_tr, x_va, y_va, seed, lr=1e-3, batch_size=128,
                max_epochs=100, patience=5):
    """Adam on BCE with early stopping on validation accuracy; restores the best weights."""
    g = torch.Generator().manual_seed(int(seed))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    y_tr = _tensor(y_tr)
    best, best_state, stale = -1.0, None, 0
    for _ in range(max_epochs):
        perm = torch.randperm(len(x_tr), generator=g)
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            p = model(x_tr[idx]).clamp(1e-7, 1 - 1e-7)
            loss = nn.functional.binary_cross_entropy(p, y_tr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc = accuracy((_batched(model, x_va) > 0.5).numpy(), y_va)
        if acc > best:
            best, stale = acc, 0
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= patience:
                break
    model.load_state_dict(best_state)
    return model, best


def train_oracle(dataset: Dataset, seed: int = 0, width: int = 16, max_epochs: int = 30) -> OracleClassifier:
    """Train the independent attribute classifier on real train images only."""
    _, c, h, _ = dataset.images.shape
    torch.manual_seed(seed)
    oracle = OracleClassifier(ArchSpec(image_size=h, channels=c, width=width))
    x_tr, y_tr = dataset.split("train")
    x_va, y_va = dataset.split("val")
    if len(x_va) == 0:
        x_tr, y_tr, x_va, y_va = x_tr[:-len(x_tr) // 10], y_tr[:-len(y_tr) // 10], x_tr[-len(x_tr) // 10:], y_tr[-len(y_tr) // 10:]
    _fit_binary(oracle, _tensor(x_tr), y_tr, _tensor(x_va), y_va, seed, max_epochs=max_epochs)
    oracle.trained.fill_(True)
    oracle.eval()
    return oracle


def probe_accuracy(bundle: NetworkBundle, dataset: Dataset, seed: int = 0, patience: int = 5,
                   sampled: bool = True) -> float:
    """Test accuracy of a fresh auxiliary-shaped probe trained on frozen identity codes.

    The probe is trained on train-split codes with early stopping on the val split.
    With ``sampled`` the codes are reparameterized samples drawn once with a
    seeded generator (what the auxiliary network sees); otherwise posterior means.
    """
    g = torch.Generator().manual_seed(int(seed)) if sampled else None
    codes = {s: identity_codes(bundle, dataset.split(s)[0], g).float() for s in ("train", "val", "test")}
    labels = {s: dataset.split(s)[1] for s in ("train", "val", "test")}
    # standardize with train statistics; the codes' scale is arbitrary
    mean, std = codes["train"].mean(0), codes["train"].std(0).clamp_min(1e-6)
    codes = {k: (v - mean) / std for k, v in codes.items()}
    torch.manual_seed(seed)
    probe = Auxiliary(bundle.arch.d_z, bundle.arch.aux_hidden)
    _fit_binary(probe, codes["train"], labels["train"], codes["val"], labels["val"], seed,
                max_epochs=200, patience=patience)
    with torch.no_grad():
        return accuracy((probe(codes["test"]) > 0.5).numpy(), labels["test"])


def evaluate(bundle: NetworkBundle, dataset: Dataset, oracle, seed: int = 0, split: str = "test") -> MetricsReport:
    _require_ready(bundle)
    x, y = dataset.split(split)
    pos = y == 1
    factors = dataset.split_factors(split)[pos] if isinstance(oracle, PixelRuleOracle) else None
    c0, c1 = edit_success_rates(bundle, x[pos], oracle, factors)
    return MetricsReport(
        mse=reconstruction_mse(bundle, x),
        c_attr0=c0,
        c_attr1=c1,
        enc_cls_acc=classifier_accuracy(bundle, x, y),
        aux_probe_acc=probe_accuracy(bundle, dataset, seed),
        n_eval=int(len(x)),
    )


# --- ablation grid ------------------------------------------------------------


@dataclass
class AblationRow:
    name: str
    config: ExperimentConfig
    reports: list[MetricsReport] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def mean(self) -> MetricsReport | None:
        if not self.reports:
            return None
        vals = {f.name: float(np.mean([getattr(r, f.name) for r in self.reports])) for f in fields(MetricsReport)}
        vals["n_eval"] = int(self.reports[0].n_eval)
        return MetricsReport(**vals)


def run_ablation(dataset: Dataset, grid, oracle, seeds=(0, 1, 2), out_dir=None, trainer=None) -> list[AblationRow]:
    """Train and evaluate every config in ``grid`` once per seed.

    A row whose training or evaluation raises is marked failed and the grid continues.
    ``trainer(dataset, config, out_dir)`` defaults to :func:`factorkit.training.train`.
    """
    from .training import train

    trainer = trainer or (lambda d, cfg, out: train(d, cfg, out_dir=out).bundle)
    rows = []
    for i, cfg in enumerate(grid):
        row = AblationRow(cfg.name or f"row{i + 1}", cfg)
        for seed in seeds:
            run_cfg = cfg.replace(seed=int(seed))
            run_dir = Path(out_dir) / f"row{i + 1}_seed{seed}" if out_dir is not None else None
            try:
                bundle = trainer(dataset, run_cfg, run_dir)
                bundle.ready = True
                report = evaluate(bundle, dataset, oracle, seed=int(seed))
            except (FactorkitError, RuntimeError, ValueError) as exc:
                log.warning("ablation row %s seed %s failed: %s", row.name, seed, exc)
                row.error = f"{type(exc).__name__}: {exc}"
                break
            row.reports.append(report)
            row.seeds.append(int(seed))
        rows.append(row)
    return rows


def format_table(rows: list[AblationRow]) -> str:
    """Human-readable table with MSE, C0, C1 and encoder accuracy columns."""
    header = ("Model", "MSE", "C_not-attr", "C_attr", "Acc(E_y)", "Probe")
    lines = []
    for r in rows:
        m = r.mean()
        if r.failed or m is None:
            lines.append((r.name, "failed", "", "", "", ""))
        else:
            lines.append((r.name, f"{m.mse:.4f}", f"{100 * m.c_attr0:.1f}%", f"{100 * m.c_attr1:.1f}%",
                          f"{100 * m.enc_cls_acc:.1f}%", f"{100 * m.aux_probe_acc:.1f}%"))
    widths = [max(len(str(row[i])) for row in [header, *lines]) for i in range(len(header))]
    fmt = lambda row: "  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *map(fmt, lines)])


def table_csv(rows: list[AblationRow]) -> str:
    """Machine-readable form: one line per (row, seed) plus one mean line per row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [f.name for f in fields(MetricsReport)]
    w.writerow(["row", "seed", *cols, "error"])
    for r in rows:
        for seed, rep in zip(r.seeds, r.reports):
            w.writerow([r.name, seed, *[getattr(rep, c) for c in cols], ""])
        m = r.mean()
        w.writerow([r.name, "mean", *([getattr(m, c) for c in cols] if m else [""] * len(cols)), r.error or ""])
    return buf.getvalue()


# --- image grids ----------------------------------------------------------------


def render_grid(rows, path, separator: int = 2, fill: float = 1.0) -> Path:
    """Tile rows of (B, C, H, W) image batches into one lossless PNG, row-major."""
    rows = [np.asarray(_tensor(r).numpy() if isinstance(r, torch.Tensor) else r, dtype=np.float32) for r in rows]
    if not rows:
        raise ContractError("no rows to render")
    shape = rows[0].shape
    if any(r.shape != shape for r in rows):
        raise ContractError("all rows must have equal batch width and image shape")
    b, c, h, w = shape
    canvas = np.full((c, len(rows) * h + (len(rows) - 1) * separator, b * w + (b - 1) * separator), fill, np.float32)
    for i, r in enumerate(rows):
        for j in range(b):
            y0, x0 = i * (h + separator), j * (w + separator)
            canvas[:, y0:y0 + h, x0:x0 + w] = r[j]
    pixels = np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(pixels[0] if c == 1 else pixels.transpose(1, 2, 0))
    path = Path(path)
    img.save(path, format="PNG")
    return path


def read_grid(path, rows: int, cols: int, tile: int, separator: int = 2) -> np.ndarray:
    """Inverse of :func:`render_grid` (up to 8-bit quantization): (rows, cols, C, H, W)."""
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    out = np.empty((rows, cols, arr.shape[0], tile, tile), np.float32)
    for i in range(rows):
        for j in range(cols):
            y0, x0 = i * (tile + separator), j * (tile + separator)
            out[i, j] = arr[:, y0:y0 + tile, x0:x0 + tile]
    return out
