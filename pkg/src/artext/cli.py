"""Command-line entry points: train, infer, eval, stats, synth, gradcheck.

Exit codes: 0 success, 1 usage or configuration problem, 2 data problem,
3 numeric failure. Reports carry no timestamps so identical runs produce
identical bytes.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataio, geomeval, pipeline
from .config import format_config, make_config
from .dataio import load_checkpoint, parse_annotation, read_image, read_manifest
from .errors import (
    ArtextError,
    ConfigError,
    DataError,
    NumericError,
    ShapeError,
    UsageError,
)
from .pipeline import Detector, Trainer, detect


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--profile", choices=("desk", "paper"), default=None)
    p.add_argument("--no-rcca", action="store_true")
    p.add_argument("--cycles", type=int, default=None)
    p.add_argument("--no-rfpn", action="store_true")
    p.add_argument("--no-rfrm", action="store_true")
    p.add_argument("--no-bdm", action="store_true")
    p.add_argument("--filter", choices=("off", "heuristic"), default=None)
    p.add_argument("--iou", default=None, help="comma-separated thresholds")


def _config_from(ns, **extra):
    overrides = dict(
        seed=ns.seed,
        cycles=ns.cycles,
        use_rcca=False if ns.no_rcca else None,
        use_rfpn=False if ns.no_rfpn else None,
        use_rfrm=False if ns.no_rfrm else None,
        use_bdm=False if ns.no_bdm else None,
        artistic_filter=ns.filter,
        thresholds=tuple(float(t) for t in ns.iou.split(",")) if ns.iou else None,
    )
    overrides.update(extra)
    return make_config(profile=ns.profile, config_file=ns.config, **overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="artext", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector on a manifest")
    _add_common(p)
    p.add_argument("--manifest", default=None, help="training manifest")
    p.add_argument("--val-manifest", default=None)
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("infer", help="detect text in images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=".", help="directory for detection files")
    p.add_argument("images", nargs="+")

    p = sub.add_parser("eval", help="score detections against ground truth")
    _add_common(p)
    p.add_argument("--gt", required=True, help="ground-truth manifest")
    p.add_argument("--dets", required=True, help="directory of detection files")
    p.add_argument("--out", default=None, help="report path (default stdout)")

    p = sub.add_parser("stats", help="dataset complexity report")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="report path (default stdout)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--difficulty", choices=dataio.SYNTH_MODES, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every stage")
    _add_common(p)
    return parser


# ------------------------------------------------------------------- commands

def cmd_train(ns) -> int:
    cfg = _config_from(
        ns,
        train_manifest=ns.manifest,
        val_manifest=ns.val_manifest,
        out_dir=ns.out,
        epochs=ns.epochs,
        batch=ns.batch,
        lr0=ns.lr,
        image_size=ns.size,
    )
    trainer = Trainer(cfg, echo=print)
    if ns.resume:
        trainer.resume(ns.resume)
    summary = trainer.run()
    print(f"done: {summary['epochs_run']} epochs, checkpoint {summary['checkpoint']}")
    return 0


def _format_detections(found) -> str:
    lines = []
    for p in found:
        coords = ",".join(f"{v:.2f}" for v in p.points.reshape(-1))
        lines.append(f"{coords},{p.score:.4f}")
    return "\n".join(lines) + ("\n" if lines else "")


def cmd_infer(ns) -> int:
    cfg = _config_from(ns)
    model = Detector(cfg, rng=np.random.default_rng(cfg.seed))
    load_checkpoint(ns.checkpoint, model)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    print("config:")
    print("\n".join("  " + ln for ln in format_config(cfg).splitlines()))
    failures = 0
    for image_path in ns.images:
        try:
            image = read_image(image_path)
        except (DataError, OSError) as e:
            print(f"error: {image_path}: {e}", file=sys.stderr)
            failures += 1
            continue
        if image.ndim == 2:
            image = np.repeat(image[:, :, None], 3, axis=2)
        found = detect(model, image)
        target = out / (Path(image_path).stem + ".det.txt")
        target.write_text(_format_detections(found))
        print(f"{image_path}: {len(found)} detections -> {target}")
    return 2 if failures else 0


def parse_detections(path) -> list[tuple[np.ndarray, float]]:
    """Detection files are annotation lines with a trailing score; plain
    annotation lines (even field count, optional ###) are accepted too."""
    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if fields[-1] == "###":
            fields = fields[:-1]
        score = 1.0
        if len(fields) % 2 == 1:
            score = float(fields[-1])
            fields = fields[:-1]
        if len(fields) < 6:
            raise DataError(f"{path}: line {ln}: detection needs >= 3 vertices")
        try:
            vals = [float(f) for f in fields]
        except ValueError as e:
            raise DataError(f"{path}: line {ln}: {e}") from None
        out.append((np.asarray(vals, dtype=np.float64).reshape(-1, 2), score))
    return out


def cmd_eval(ns) -> int:
    cfg = _config_from(ns)
    dets_dir = Path(ns.dets)
    dets, gts, flags, sizes, missing = [], [], [], [], 0
    pairs = read_manifest(ns.gt)
    for img_path, ann_path in pairs:
        image = read_image(img_path)
        polys = parse_annotation(ann_path)
        det_file = dets_dir / (Path(img_path).stem + ".det.txt")
        if det_file.exists():
            found = [pts for pts, _ in parse_detections(det_file)]
        else:
            print(f"warning: no detection file for {img_path}", file=sys.stderr)
            found = []
            missing += 1
        dets.append(found)
        gts.append([v for v, _ in polys])
        flags.append([ig for _, ig in polys])
        sizes.append(image.shape[:2])
    report = geomeval.evaluate_detections(dets, gts, flags, sizes, cfg.thresholds)

    lines = [f"detection evaluation over {len(pairs)} images"]
    if missing:
        lines.append(f"missing detection files treated as empty: {missing}")
    for th in cfg.thresholds:
        m = report.metrics[th]
        c = report.counts[th]
        lines.append(
            f"iou {th:.2f}: P={m['precision']:.4f} R={m['recall']:.4f} "
            f"F={m['f_measure']:.4f} (tp={c['tp']} fp={c['fp']} fn={c['fn']})")
    lines.append("")
    lines.append("[metrics]")
    for th in cfg.thresholds:
        m = report.metrics[th]
        for key in ("precision", "recall", "f_measure"):
            lines.append(f"iou_{th:.2f}_{key} = {m[key]:.6f}")
    lines.append("")
    lines.append("[config]")
    lines.extend(format_config(cfg).splitlines())
    text = "\n".join(lines) + "\n"
    if ns.out:
        Path(ns.out).write_text(text)
        print(f"report -> {ns.out}")
    else:
        print(text, end="")
    return 0


def cmd_stats(ns) -> int:
    cfg = _config_from(ns)
    polys = []
    for _, ann_path in read_manifest(ns.manifest):
        polys.extend(v for v, _ in parse_annotation(ann_path))
    stats = geomeval.dataset_stats(polys)
    lines = [f"complexity statistics over {stats['total']} text regions"]
    for name in geomeval.BUCKET_ORDER:
        n = stats["buckets"][name]
        share = n / stats["total"] if stats["total"] else 0.0
        lines.append(f"  {name:20s} {n:6d}  {share:6.1%}")
    lines.append("")
    lines.append("[metrics]")
    for name in geomeval.BUCKET_ORDER:
        lines.append(f"bucket_{name} = {stats['buckets'][name]}")
    lines.append(f"total = {stats['total']}")
    lines.append("")
    lines.append("[config]")
    lines.extend(format_config(cfg).splitlines())
    text = "\n".join(lines) + "\n"
    if ns.out:
        Path(ns.out).write_text(text)
        print(f"report -> {ns.out}")
    else:
        print(text, end="")
    return 0


def cmd_synth(ns) -> int:
    cfg = _config_from(ns, synth_count=ns.count, image_size=ns.size,
                       difficulty=ns.difficulty)
    manifest, digest = dataio.synth_generate(
        ns.out, seed=cfg.seed, count=cfg.synth_count, size=cfg.image_size,
        difficulty=cfg.difficulty)
    print(f"manifest: {manifest}")
    print(f"digest: {digest}")
    return 0


def cmd_gradcheck(ns) -> int:
    cfg = _config_from(ns)
    rows = pipeline.gradcheck_table(seed=cfg.seed)
    failed = 0
    for name, ok, detail in rows:
        status = "PASS" if ok else "FAIL"
        suffix = f"  {detail}" if detail else ""
        print(f"{name:18s} {status}{suffix}")
        failed += not ok
    print(f"{len(rows) - failed}/{len(rows)} passed")
    return 3 if failed else 0


_COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return _COMMANDS[ns.command](ns)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ArtextError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
