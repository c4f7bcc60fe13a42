"""Command-line entry point: ``gcolearn <command> ...``.

Failures exit nonzero after printing a single line to stderr of the form
``error: <ExceptionType>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import engine, metrics, pnm, synth
from .inference import group_consensus, predict_group


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"{self.prog}: {message}")


def _group_images(path) -> tuple[list[Path], np.ndarray]:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"group directory {d} does not exist")
    files = sorted(p for p in d.glob("*.ppm"))
    if not files:
        raise ValueError(f"no .ppm images in {d}")
    imgs = [pnm.read_image(p) for p in files]
    if len({im.shape for im in imgs}) != 1:
        raise ValueError(f"images in {d} differ in size")
    return files, np.stack(imgs).transpose(0, 3, 1, 2).astype(np.float32) / 255.0


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)


def cmd_gen_data(a) -> None:
    m = synth.generate_dataset(a.out, num_classes=a.classes, per_class=a.per_class, size=a.size,
                               seed=a.seed, eval_classes=a.eval_classes, min_distractors=a.min_distractors)
    print(f"wrote {len(m.records)} images to {a.out} (hash {synth.dataset_hash(a.out)[:16]})")


def cmd_train(a) -> None:
    from .plotting import plot_losses

    manifest = synth.load_manifest(a.data)
    cfg = engine.TrainConfig(epochs=a.epochs, episodes_per_epoch=a.episodes_per_epoch, k=a.k, lr=a.lr,
                             seed=a.seed, lambda1=a.lambda1, lambda2=a.lambda2, lambda3=a.lambda3,
                             use_gam=not a.no_gam, use_gcm=not a.no_gcm, use_acm=not a.no_acm)
    resume = None
    if a.resume:
        resume = engine.with_epochs(engine.load_checkpoint(a.resume), a.epochs)
    out = Path(a.out)
    loss_csv = a.loss_csv or out.with_suffix(".loss.csv")
    try:
        ck, hist = engine.train(cfg, manifest, resume=resume, loss_csv=loss_csv)
    except engine.NonFiniteLoss as e:
        if getattr(e, "checkpoint", None) is not None:
            engine.save_checkpoint(e.checkpoint, out.with_suffix(".last-good.gckp"))
        raise
    engine.save_checkpoint(ck, out)
    plot_losses(loss_csv, out.with_suffix(".loss.png"))
    last = hist[-1]["total"] if hist else float("nan")
    print(f"trained {ck.step} steps, final total loss {last:.4f}; checkpoint {out}")


def cmd_eval(a) -> None:
    from .plotting import plot_metrics

    ck = engine.load_checkpoint(a.ckpt)
    report = metrics.evaluate_dataset(ck, synth.load_manifest(a.data), split=a.split)
    path = Path(a.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_csv())
    plot_metrics(report, path.with_suffix(".png"))
    print(report.table())


def cmd_infer(a) -> None:
    ck = engine.load_checkpoint(a.ckpt)
    files, images = _group_images(a.group)
    probs = predict_group(ck.params, ck.model_config, images, ck.train_config.use_gam)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for f, p in zip(files, probs):
        pnm.write_gray(out / f"{f.stem}.pgm", _to_u8(p))
    print(f"wrote {len(files)} maps to {out}")


def cmd_dump_attention(a) -> None:
    ck = engine.load_checkpoint(a.ckpt)
    if not ck.train_config.use_gam:
        raise ValueError("checkpoint was trained without the affinity module; no attention to dump")
    files, images = _group_images(a.group)
    if len(files) < 2:
        raise ValueError("co-saliency attention needs a group of at least two images")
    _, _, a_s = group_consensus(ck.params, ck.model_config, images, True)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["file,min,max"]
    for f, att in zip(files, a_s[:, 0]):
        lo, hi = float(att.min()), float(att.max())
        norm = (att - lo) / (hi - lo) if hi > lo else np.zeros_like(att)
        pnm.write_gray(out / f"{f.stem}.att.pgm", _to_u8(norm))
        lines.append(f"{f.stem}.att.pgm,{lo:.9g},{hi:.9g}")
    (out / "attention_range.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(files)} attention maps to {out}")


def cmd_export_consensus(a) -> None:
    from .plotting import plot_consensus

    ck = engine.load_checkpoint(a.ckpt)
    exp = engine.export_consensus(ck, synth.load_manifest(a.data), split=a.split, sub_batch=a.sub_batch,
                                  seed=a.seed)
    path = Path(a.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(exp.to_csv())
    plot_consensus(exp, path.with_suffix(".png"))
    print(f"d1={exp.d1:.6g} d2={exp.d2:.6g} ratio={exp.ratio:.6g}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gcolearn", description="Group co-saliency training and evaluation on synthetic shapes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render the synthetic shape dataset")
    g.add_argument("--classes", type=int, default=12)
    g.add_argument("--per-class", type=int, default=40)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eval-classes", type=int, default=None)
    g.add_argument("--min-distractors", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="episode training")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--episodes-per-epoch", type=int, default=None)
    t.add_argument("--k", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-4)
    for i in (1, 2, 3):
        t.add_argument(f"--lambda{i}", type=float, default=1.0)
    t.add_argument("--no-gam", action="store_true")
    t.add_argument("--no-gcm", action="store_true")
    t.add_argument("--no-acm", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", default=None, help="continue from this checkpoint")
    t.add_argument("--loss-csv", default=None, help="default: <out>.loss.csv")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--report", required=True)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="co-saliency maps for a directory of images")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--group", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer)

    d = sub.add_parser("dump-attention", help="write the affinity attention maps of a group")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--group", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_dump_attention)

    x = sub.add_parser("export-consensus", help="consensus vectors and separability statistics")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="eval")
    x.add_argument("--sub-batch", type=int, default=None)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_consensus)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CLIError as e:
        print(f"error: UsageError: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes one parsable line
        msg = " ".join(str(e).split()) or repr(e)
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
