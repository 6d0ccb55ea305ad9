"""Command line entry point: ``drivexai <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.  Relative data paths are
resolved against ``$DRIVEXAI_DATA_ROOT`` when that variable is set.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import labels as L
from .dataset import IMPORTERS, SPLITS, DatasetError, read_manifest, write_manifest
from .gradcam import ExplanationUndefined, gradcam, render_overlay
from .metrics import MetricsError, dumps_report, report
from .synth import generate_dataset, load_png
from .training import Checkpoint, ConfigError, SweepGrid, TrainConfig, ablation_sweep, evaluate, normalize, train

DATA_ROOT_ENV = "DRIVEXAI_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

log = logging.getLogger("drivexai")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def data_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DatasetError(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _write_report(rep, out: Path, stem: str = "report"):
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(dumps_report(rep), encoding="utf-8")
    (out / f"{stem}.csv").write_text(rep.to_csv(), encoding="utf-8")
    (out / f"{stem}.txt").write_text(rep.to_text(), encoding="utf-8")


def _manifest_for(data: Path, split: str):
    return read_manifest(data / f"{split}.jsonl" if data.is_dir() else data)


# subcommands ------------------------------------------------------------------

def cmd_synth_gen(args):
    ms = generate_dataset(args.n, args.seed, data_path(args.out), tuple(args.size), args.noise)
    print(" ".join(f"{k}={len(v)}" for k, v in ms.items()))


def cmd_import(args):
    importer = IMPORTERS[args.format]
    root, out = data_path(args.root), data_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = SPLITS if args.split == "all" else (args.split,)
    for split in splits:
        m = importer(root, split)
        write_manifest(m, out / f"{split}.jsonl")
        print(f"{split}: {len(m)} records")


def cmd_train(args):
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    data = data_path(args.data)
    tr = _manifest_for(data, "train")
    va = read_manifest(data / "val.jsonl") if (data / "val.jsonl").exists() else None
    out = Path(args.out)
    with run_lock(out):
        result = train(tr, va, cfg, out)
        ck = out / "checkpoints" / "best.pt"
        if va is not None:
            rep = evaluate(va, result.best)
            rep.extra["checkpoint_sha256"] = file_sha256(ck)
            _write_report(rep, out / "reports", "val")
    print(f"best epoch {result.best.epoch}; checkpoint {ck}")


def cmd_eval(args):
    ck = Checkpoint.load(args.checkpoint)
    m = _manifest_for(data_path(args.data), "test")
    pm = L.load_pair_matrix(args.pairs)
    rep = evaluate(m, ck, pm, theta=args.theta, empty_policy=args.empty_policy, overall_policy=args.overall_policy)
    rep.extra["checkpoint_sha256"] = file_sha256(args.checkpoint)
    rep.extra["theta"] = args.theta
    _write_report(rep, Path(args.out))
    print(_summary(rep))


def read_predictions(path):
    ids, ap, rp, ag, rg = [], [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                row = (d["action_probs"], d["reason_probs"], d["gt_actions"], d["gt_reasons"])
                sizes = tuple(len(v) for v in row)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed prediction: {exc}") from exc
            if sizes != (L.N_ACTIONS, L.N_REASONS, L.N_ACTIONS, L.N_REASONS):
                raise DatasetError(f"{path}: line {lineno}: label arity mismatch")
            ids.append(d["id"])
            for acc, v in zip((ap, rp, ag, rg), row):
                acc.append(v)
    if not ids:
        raise DatasetError(f"{path}: no predictions")
    return ids, *(np.asarray(v, dtype=np.float64) for v in (ap, rp, ag, rg))


def cmd_metrics(args):
    _, ap, rp, ag, rg = read_predictions(data_path(args.predictions))
    pm = L.load_pair_matrix(args.pairs)
    theta = L.DecisionConfig(args.theta)
    rep = report(
        L.decide(ap, theta), L.decide(rp, theta), ag.astype(int), rg.astype(int), pm,
        not args.no_exclusion, args.empty_policy, args.overall_policy,
    )
    rep.extra["theta"] = args.theta
    if args.out:
        _write_report(rep, Path(args.out))
    print(rep.to_text(), end="")


def cmd_explain(args):
    ck = Checkpoint.load(args.checkpoint)
    model = ck.model()
    img = torch.from_numpy(load_png(data_path(args.image)))[None]
    size = ck.config.input_size
    if tuple(img.shape[-2:]) != size:
        img = torch.nn.functional.interpolate(img.float(), size=size, mode="bilinear", align_corners=False).round().clamp(0, 255).to(torch.uint8)
    x = normalize(img)
    with torch.no_grad():
        out = model(x) if ck.config.reason_mode != "oracle" else None
    if out is None:
        raise ConfigError("checkpoint was trained with oracle action inputs; explain needs a predicted-mode model")
    hm = gradcam(model, x, threshold=ck.config.theta)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    _, sidecar = render_overlay(
        img[0].numpy(), hm, out.action_probs[0].numpy(), out.reason_probs[0].numpy(),
        out_dir / f"{stem}_gradcam.png", ck.config.theta,
        extra={"image": str(args.image), "checkpoint_sha256": file_sha256(args.checkpoint)},
    )
    for kind in ("actions", "reasons"):
        for item in sidecar[kind]:
            print(f"{kind[:-1]:<7}{item['text']:<32}{item['probability']:.3f}")


def cmd_sweep(args):
    grid_doc = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    data = data_path(args.data or grid_doc.pop("data", ""))
    grid_doc.pop("data", None)
    grid = SweepGrid.from_json(grid_doc)
    tr, va, te = (read_manifest(data / f"{s}.jsonl") for s in SPLITS)
    out = Path(args.out)
    with run_lock(out):
        rows = ablation_sweep(grid, tr, va, te, out)
    for row in rows:
        keys = ("f1_action_overall", "f1_reason_overall", "f1_joint_overall")
        vals = " ".join(f"{k}={row[k]:.3f}" for k in keys if k in row)
        print(f"lambda={row['lambda']} mode={row['reason_mode']} r={row['reduction']} {row['status']} {vals}")


def _summary(rep) -> str:
    return " ".join(f"{k}={v:.3f}" for k, v in rep.aggregates().items())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drivexai", description="Decision-aware action/reason prediction toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-gen", help="generate a synthetic labeled scene dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, nargs=2, default=[128, 256], metavar=("H", "W"))
    s.add_argument("--noise", type=float, default=0.0, help="label flip rate (noisy-annotation mode)")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("import", help="convert BDD-OIA / nu-AR annotations into manifests")
    s.add_argument("--format", choices=sorted(IMPORTERS), required=True)
    s.add_argument("--root", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=SPLITS + ("all",), default="all")
    s.set_defaults(func=cmd_import)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--data", required=True, help="directory with train.jsonl (and val.jsonl)")
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="manifest file, or directory holding test.jsonl")
    s.add_argument("--pairs", help="pair matrix JSON (default: built-in)")
    s.add_argument("--out", required=True)
    s.add_argument("--theta", type=float, default=0.5)
    s.add_argument("--empty-policy", choices=("one", "zero"), default="one")
    s.add_argument("--overall-policy", choices=("sample", "micro"), default="sample")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("metrics", help="compute metrics from a predictions file")
    s.add_argument("--predictions", required=True)
    s.add_argument("--pairs")
    s.add_argument("--theta", type=float, default=0.5)
    s.add_argument("--empty-policy", choices=("one", "zero"), default="one")
    s.add_argument("--overall-policy", choices=("sample", "micro"), default="sample")
    s.add_argument("--no-exclusion", action="store_true", help="disable the simultaneous-turn exclusion rule")
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("explain", help="Grad-CAM overlay + textual explanation for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("sweep", help="ablation sweep over lambda / reason input mode / reduction ratio")
    s.add_argument("--grid", required=True)
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"drivexai: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (DatasetError, L.LabelError, MetricsError, ConfigError, ExplanationUndefined, FileNotFoundError, ValueError) as exc:
        print(f"drivexai: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
