"""Command-line entry point: ``factorkit <subcommand> ...``.

Every command that writes into an output directory drops a ``manifest.json``
there before any long-running work starts and completes it (end time and
outputs) when the work finishes.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, read_config
from .errors import ContractError, FactorkitError, FormatError
from .evaluation import (
    MetricsReport,
    edit_attribute,
    evaluate,
    format_table,
    render_grid,
    run_ablation,
    table_csv,
    train_oracle,
)
from .models import ArchSpec, OracleClassifier, PixelRuleOracle, oracle_classify
from .synthdata import generate_dataset, load_dataset, save_dataset
from .training import load_checkpoint, train

log = logging.getLogger("factorkit")

MANIFEST_NAME = "manifest.json"


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Provenance record for one artifact directory."""

    command: str
    argv: list[str]
    seed: int | None
    config_hash: str | None
    config: dict | None
    dataset: str | None
    dataset_hash: str | None
    code_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = "running"
    outputs: list[str] = field(default_factory=list)

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        os.replace(tmp, path)
        return path

    def finish(self, directory, outputs=(), status="ok") -> Path:
        self.finished = _now()
        self.status = status
        self.outputs = sorted({*self.outputs, *(str(o) for o in outputs)})
        return self.write(directory)

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            return cls(**json.loads(path.read_text()))
        except FileNotFoundError:
            raise
        except (ValueError, TypeError) as exc:
            raise FormatError(f"unreadable manifest {path}: {exc}", field="manifest") from exc


def _start_manifest(args, out_dir, config: ExperimentConfig | None, data_path) -> RunManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = RunManifest(
        command=args.command,
        argv=list(args.argv),
        seed=None if config is None else int(config.seed),
        config_hash=None if config is None else config.hash(),
        config=None if config is None else config.to_dict(),
        dataset=None if data_path is None else str(Path(data_path).resolve()),
        dataset_hash=None if data_path is None else file_hash(data_path),
    )
    m.write(out_dir)
    return m


def _load_oracle(kind: str, dataset, path=None, seed: int = 0):
    if kind == "pixel":
        return PixelRuleOracle()
    if path is not None and Path(path).exists():
        payload = torch.load(path, weights_only=True)
        oracle = OracleClassifier(ArchSpec(**payload["arch"]))
        oracle.load_state_dict(payload["state"])
        oracle.eval()
        return oracle
    oracle = train_oracle(dataset, seed=seed)
    if path is not None:
        _, c, h, _ = dataset.images.shape
        arch = ArchSpec(image_size=h, channels=c, width=16)
        torch.save({"arch": arch.to_dict(), "state": oracle.state_dict()}, path)
    return oracle


def _config_from_args(args) -> ExperimentConfig:
    base, rows = read_config(args.config)
    if rows:
        log.info("config %s holds %d ablation rows; train uses the [experiment] section", args.config, len(rows))
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return base.replace(**overrides) if overrides else base


# --- subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    d = generate_dataset(args.n, args.seed, image_size=args.size, channels=args.channels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(d, out)
    print(f"wrote {len(d)} images ({args.channels}x{args.size}x{args.size}) to {out} sha256={file_hash(out)[:16]}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    dataset = load_dataset(args.data)
    manifest = _start_manifest(args, args.out, config, args.data)
    (Path(args.out) / "config.cfg").write_text(_config_text(config))

    def progress(epoch, rec):
        print(f"epoch {epoch}/{config.epochs} rec={rec['rec']:.4f} kl={rec['kl']:.3f} aux={rec['aux']:.3f}", flush=True)

    result = train(dataset, config, out_dir=args.out, resume_from=args.resume, progress=progress)
    outputs = [Path(args.out) / "metrics.jsonl", *result.checkpoints, Path(args.out) / "checkpoint_last.pt"]
    manifest.finish(args.out, outputs=[str(o) for o in outputs if o.exists()])
    print(f"trained {config.epochs} epochs; checkpoint {Path(args.out) / 'checkpoint_last.pt'}")
    return 0


def _config_text(config: ExperimentConfig) -> str:
    lines = ["[experiment]"]
    lines += [f"{k} = {v}" for k, v in config.to_dict().items() if k != "name"]
    return "\n".join(lines) + "\n"


def _report_text(report: MetricsReport) -> str:
    return "\n".join(f"{k:>14}: {v}" for k, v in report.to_dict().items())


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    oracle = _load_oracle(args.oracle, dataset, args.oracle_path, seed=args.seed)
    report = evaluate(ck.bundle, dataset, oracle, seed=args.seed, split=args.split)
    print(_report_text(report))
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_ablate(args) -> int:
    base, rows = read_config(args.grid)
    if not rows:
        raise ContractError(f"{args.grid} defines no [ablation.rowN] sections")
    if args.epochs is not None:
        rows = [r.replace(epochs=args.epochs) for r in rows]
    seeds = [int(s) for s in args.seeds.split(",")]
    dataset = load_dataset(args.data)
    out = Path(args.out)
    manifest = _start_manifest(args, out, base, args.data)
    manifest.config = {"base": base.to_dict(), "rows": [r.to_dict() for r in rows], "seeds": seeds}
    manifest.write(out)
    oracle = _load_oracle(args.oracle, dataset, out / "oracle.pt")

    def trainer(d, cfg, run_dir):
        run_manifest = _start_manifest(args, run_dir, cfg, args.data)
        result = train(d, cfg, out_dir=run_dir)
        run_manifest.finish(run_dir, outputs=[run_dir / "metrics.jsonl", *result.checkpoints])
        return result.bundle

    table = run_ablation(dataset, rows, oracle, seeds=seeds, out_dir=out, trainer=trainer)
    text = format_table(table)
    (out / "table.txt").write_text(text + "\n")
    (out / "table.csv").write_text(table_csv(table))
    print(text)
    manifest.finish(out, outputs=[out / "table.txt", out / "table.csv"])
    return 1 if any(r.failed for r in table) else 0


def cmd_edit(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    x, y = dataset.split(args.split)
    idx = np.flatnonzero(y == 1 - args.target)[: args.n] if args.opposite else np.arange(min(args.n, len(x)))
    if len(idx) == 0:
        raise ContractError("no source images to edit")
    src = torch.from_numpy(np.ascontiguousarray(x[idx]))
    edited = edit_attribute(ck.bundle, src, args.target).float()
    other = edit_attribute(ck.bundle, src, 1 - args.target).float()
    rows = [src, edited, other] if args.target == 1 else [src, other, edited]
    path = render_grid(rows, args.grid)
    print(f"wrote {path} (rows: originals, edited to 1, edited to 0; {len(idx)} columns)")
    if args.oracle != "none":
        oracle = _load_oracle(args.oracle, dataset, args.oracle_path)
        factors = dataset.split_factors(args.split)[idx] if args.oracle == "pixel" else None
        labels = oracle_classify(oracle, edited, factors)
        print(f"oracle agrees with target {args.target} on {float((labels == args.target).mean()):.3f} of edits")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    manifest = RunManifest.read(run)
    print(f"command: {manifest.command}  status: {manifest.status}")
    print(f"config {manifest.config_hash}  dataset {str(manifest.dataset_hash)[:16]}  seed {manifest.seed}")
    print(f"started {manifest.started}  finished {manifest.finished}")
    if manifest.dataset and manifest.dataset_hash and Path(manifest.dataset).exists():
        ok = file_hash(manifest.dataset) == manifest.dataset_hash
        print(f"dataset hash {'verified' if ok else 'MISMATCH'}")
    metrics = run / "metrics.jsonl"
    if metrics.exists():
        val = [json.loads(line) for line in metrics.read_text().splitlines() if '"val"' in line]
        for rec in val:
            print(f"epoch {rec['epoch']:>3}  rec {rec['rec']:.4f}  kl {rec['kl']:.3f}  class_in {rec['class_in']:.3f}"
                  f"  gan {rec['gan']:.3f}  aux {rec['aux']:.3f}")
    table = run / "table.txt"
    if table.exists():
        print(table.read_text().rstrip())
    return 0


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="factorkit", description="Attribute-factorized VAE-GAN experiments")
    p.add_argument("--version", action="version", version=f"factorkit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic sprite dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--channels", type=int, choices=(1, 3), default=3)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    oracle_kw = dict(choices=("learned", "pixel"), default="learned",
                     help="learned CNN trained on real images, or the exact pixel rule")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--oracle", **oracle_kw)
    e.add_argument("--oracle-path", help="cache file for the learned oracle")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--json", help="also write the report as JSON here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--grid", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--epochs", type=int)
    a.add_argument("--oracle", **oracle_kw)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("edit", help="edit the attribute of test images and render a grid")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--target", type=int, choices=(0, 1), required=True)
    d.add_argument("--grid", required=True, help="output PNG")
    d.add_argument("--n", type=int, default=8)
    d.add_argument("--split", default="test", choices=("train", "val", "test"))
    d.add_argument("--opposite", action="store_true", help="only edit images whose label differs from the target")
    d.add_argument("--oracle", choices=("learned", "pixel", "none"), default="none")
    d.add_argument("--oracle-path")
    d.set_defaults(func=cmd_edit)

    r = sub.add_parser("report", help="summarize a run or ablation directory")
    r.add_argument("run")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("FACTORKIT_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"factorkit: configuration error: FACTORKIT_THREADS={threads!r} is not an integer", file=sys.stderr)
            return 3
    try:
        return args.func(args)
    except FactorkitError as exc:
        print(f"factorkit: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"factorkit: io error: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
