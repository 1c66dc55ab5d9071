"""Command-line entry point: ``dptr <subcommand> ...``.

Every command prints a one-line JSON summary on success. On failure it prints
``{"status": "error", ...}`` to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import pipeline as pl
from .corpus import LabelCorpus, load_labels, toy_wordlist, dedup_and_load, write_vocabulary
from .dualenc import train_dual_encoder
from .perturb import PerturbCache, build_cache, load_cache
from .render import DEFAULT_CANVAS, DOMAINS, TextImage, build_dataset, load_manifest, make_photo, write_pgm

# (flag, TrainConfig field, type)
CONFIG_FLAGS = [
    ("--lambda", "lam", float),
    ("--L-u", "L_u", int),
    ("--K", "K", int),
    ("--variant", "variant", str),
    ("--merge", "merge", str),
    ("--lr", "lr", float),
    ("--batch", "batch", int),
    ("--epochs", "epochs", int),
    ("--pretrain-epochs", "pretrain_epochs", int),
    ("--pretrain-batch", "pretrain_batch", int),
    ("--max-len", "max_len", int),
    ("--dim", "dim", int),
    ("--heads", "heads", int),
    ("--enc-layers", "enc_layers", int),
    ("--dec-layers", "dec_layers", int),
]


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"status": "error", "type": "UsageError", "message": message}, sort_keys=True), file=sys.stderr)
        sys.exit(2)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int, required=True)
    for flag, name, typ in CONFIG_FLAGS:
        p.add_argument(flag, dest=name, type=typ, default=None)
    p.add_argument("--freeze-decoder", dest="freeze_decoder", action="store_true", default=None)


def _config(args) -> pl.TrainConfig:
    data = json.loads(args.config.read_text(encoding="utf-8")) if args.config else {}
    if "lambda" in data:
        data["lam"] = data.pop("lambda")
    for _, name, _ in CONFIG_FLAGS:
        if getattr(args, name) is not None:
            data[name] = getattr(args, name)
    if args.freeze_decoder:
        data["freeze_decoder"] = True
    data["seed"] = args.seed
    return pl.TrainConfig.from_dict(data)


def _corpus(path: Path | None, max_len: int = 12) -> LabelCorpus:
    return load_labels(path, max_len) if path else dedup_and_load(toy_wordlist(), max_len)


def _emit(**fields) -> None:
    print(json.dumps({"status": "ok", **fields}, sort_keys=True))


# --- commands --------------------------------------------------------------------


def cmd_render(args) -> None:
    out = Path(args.out)
    if args.domain == "photo":
        for i in range(args.count):
            img = make_photo(DEFAULT_CANVAS, np.random.SeedSequence([args.seed, 0xF070, i]))
            write_pgm(out / f"photo_{i:05d}.pgm", img.pixels)
        _emit(command="render", domain="photo", count=args.count, out=str(out))
        return
    corpus = _corpus(args.labels, args.max_len)
    man = build_dataset(
        corpus, args.per_label, args.domain, args.split_frac, args.seed, out,
        strength=args.strength, workers=args.workers,
    )
    (out / "labels.txt").write_text("\n".join(corpus.labels) + "\n", encoding="utf-8")
    write_vocabulary(out / "vocab.json")
    _emit(command="render", domain=args.domain, entries=len(man.entries),
          train=len(man.split("train")), test=len(man.split("test")), out=str(out))


def cmd_train_dualenc(args) -> None:
    man = load_manifest(args.manifest)
    entries = man.split("train") if args.train_only else man.entries
    images = man.load_images(entries)
    model, losses = train_dual_encoder(
        images, [e.label for e in entries], steps=args.steps, batch=args.batch, seed=args.seed, lr=args.lr,
    )
    ckpt = pl.dualenc_checkpoint(model, args.seed, {"loss_curve": losses, "final_loss": losses[-1]})
    ckpt.save(args.out)
    _emit(command="train-dualenc", final_loss=losses[-1], out=str(args.out))


def _photo_images(src: Path) -> np.ndarray:
    from .render import read_pgm

    paths = sorted(src.glob("*.pgm"))
    if not paths:
        raise CLIError(f"no PGM images in {src}")
    return np.stack([read_pgm(p) for p in paths])


def cmd_build_cache(args) -> None:
    encoder = pl.dualenc_from_checkpoint(pl.load_checkpoint(args.dualenc))
    images = _photo_images(args.images)
    cache = build_cache(images, encoder, args.count, args.seed)
    cache.save(args.out)
    _emit(command="build-cache", count=cache.count, rows=cache.rows, D=cache.D, out=str(args.out))


def cmd_import_cache(args) -> None:
    src = Path(args.source)
    if src.suffix == ".npy":
        bank = np.load(src)
        if bank.ndim != 3:
            raise CLIError("imported array must be count x rows x D")
        if not np.isfinite(bank).all():
            raise CLIError("non-finite values in imported array")
        cache = PerturbCache(torch.as_tensor(bank, dtype=torch.float32), args.seed)
        if args.min_rows is not None and cache.rows < args.min_rows:
            raise CLIError("cache entry too short")
        cache.save(args.out)
    else:
        cache = load_cache(src, args.min_rows)
        if Path(args.out).resolve() != src.resolve():
            shutil.copyfile(src, args.out)
    _emit(command="import-cache", count=cache.count, rows=cache.rows, D=cache.D, out=str(args.out))


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    encoder = pl.dualenc_from_checkpoint(pl.load_checkpoint(args.dualenc))
    cache = load_cache(args.cache, encoder.text_len) if args.cache else None
    ckpt = pl.pretrain_decoder(_corpus(args.labels, cfg.max_len), encoder, cache, cfg)
    ckpt.save(args.out)
    _emit(command="pretrain", final_loss=ckpt.metrics["final_loss"], config_hash=cfg.hash(), out=str(args.out))


def cmd_finetune(args) -> None:
    cfg = _config(args)
    dec = pl.load_checkpoint(args.decoder) if args.decoder else None
    ckpt = pl.finetune(load_manifest(args.manifest), dec, cfg)
    ckpt.save(args.out)
    _emit(command="finetune", final_loss=ckpt.metrics["final_loss"], config_hash=cfg.hash(), out=str(args.out))


def cmd_eval(args) -> None:
    report = pl.evaluate(pl.load_checkpoint(args.ckpt), load_manifest(args.manifest), args.split)
    if args.predictions:
        report.write_predictions(args.predictions)
    _emit(command="eval", **report.summary())


def cmd_ablate(args) -> None:
    cfg = _config(args)
    encoder = pl.dualenc_from_checkpoint(pl.load_checkpoint(args.dualenc))
    lab = pl.Lab(
        corpus=_corpus(args.labels, cfg.max_len),
        text_encoder=encoder,
        cache=load_cache(args.cache, encoder.text_len),
        manifest=load_manifest(args.manifest),
        clean_manifest=load_manifest(args.clean_manifest) if args.clean_manifest else None,
    )
    grid = args.grid.split(",") if args.grid else DEFAULT_GRIDS[args.kind](cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed, args.seed + 1, args.seed + 2]
    rows = pl.run_ablation(args.kind, grid, cfg, lab, seeds, splits=tuple(args.splits.split(",")))
    pl._atomic_text(Path(args.out), pl.ablation_csv(rows))
    failed = sum(r["status"] != "ok" for r in rows)
    _emit(command="ablate", kind=args.kind, runs=len(rows), failed=failed,
          means=pl.setting_means(rows, args.splits.split(",")[0]), out=str(args.out))


DEFAULT_GRIDS = {
    "lambda": lambda cfg: ["0", "0.01", "0.1", "0.5", "1"],
    "L_u": lambda cfg: ["w/o", str(cfg.max_len - 6), str(cfg.max_len + 1), str(cfg.max_len + 4)],
    "merge": lambda cfg: ["cut", "pool", "fmu"],
    "pretrain_source": lambda cfg: list(pl.PRETRAIN_SOURCES),
}


def cmd_simprobe(args) -> None:
    encoder = pl.dualenc_from_checkpoint(pl.load_checkpoint(args.dualenc))
    study = pl.similarity_study(
        _corpus(args.labels), load_manifest(args.clean), load_manifest(args.cluttered), encoder,
        normalize=args.normalize,
    )
    if args.out:
        pl._atomic_text(Path(args.out), study.histogram_csv())
    _emit(command="simprobe", fraction=study.fraction, labels=study.n_labels, skipped=study.skipped)


def cmd_export_attn(args) -> None:
    from .vision import dump_attention, export_attention

    ckpt = pl.load_checkpoint(args.ckpt)
    model = pl.model_from_checkpoint(ckpt)
    if model.merge != "fmu":
        raise CLIError(f"checkpoint uses merge={model.merge!r}; attention maps need fmu")
    man = load_manifest(args.manifest)
    entries = man.split(args.split)
    if not 0 <= args.index < len(entries):
        raise CLIError(f"index {args.index} out of range for {len(entries)} entries")
    entry = entries[args.index]
    pixels = man.load_images([entry])
    with torch.no_grad():
        _, attn = model.memory(torch.as_tensor(pixels), return_attn=True)
    attn = attn[0].numpy()
    img = TextImage(pixels[0], entry.label, entry.domain)
    paths = export_attention(attn, img, args.out_dir, model.encoder.patch, prefix=f"attn_{args.index:05d}")
    dump_attention(Path(args.out_dir) / f"attn_{args.index:05d}.bin", attn, ckpt.seed)
    _emit(command="export-attn", label=entry.label, files=len(paths) + 1, out=str(args.out_dir))


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dptr", description="Text-only decoder pre-training toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a labelled image dataset or natural-image stand-ins")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--domain", choices=DOMAINS, default="cluttered")
    p.add_argument("--labels", type=Path, help="label file (default: bundled toy word list)")
    p.add_argument("--per-label", type=int, default=4)
    p.add_argument("--split-frac", type=float, default=0.9)
    p.add_argument("--strength", type=float, default=0.3)
    p.add_argument("--count", type=int, default=256, help="number of photo images")
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train-dualenc", help="contrastively train the dual encoder")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--train-only", action="store_true", help="use only the train split")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_train_dualenc)

    p = sub.add_parser("build-cache", help="encode natural images into a perturbation cache")
    p.add_argument("--dualenc", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True, help="directory of PGM images")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("import-cache", help="validate and import externally computed embeddings")
    p.add_argument("source", type=Path, help=".npy (count x rows x D) or cache binary")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--min-rows", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_import_cache)

    p = sub.add_parser("pretrain", help="text-only decoder pre-training")
    p.add_argument("--dualenc", type=Path, required=True)
    p.add_argument("--cache", type=Path, help="perturbation cache (required when lambda > 0)")
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune the full recognizer on images")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--decoder", type=Path, help="pre-trained decoder checkpoint (omit for Base)")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="word accuracy on a manifest split")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--predictions", type=Path, help="write per-sample JSONL here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation sweep and write a CSV table")
    p.add_argument("--kind", choices=pl.ABLATION_KINDS, required=True)
    p.add_argument("--grid", help="comma-separated settings (default: the standard grid for --kind)")
    p.add_argument("--seeds", help="comma-separated seeds (default: seed, seed+1, seed+2)")
    p.add_argument("--splits", default="test")
    p.add_argument("--dualenc", type=Path, required=True)
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--clean-manifest", type=Path, help="needed for pretrain_source=synth")
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("simprobe", help="clean vs cluttered similarity study")
    p.add_argument("--dualenc", type=Path, required=True)
    p.add_argument("--clean", type=Path, required=True)
    p.add_argument("--cluttered", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--normalize", action="store_true", help="cosine instead of raw dot products")
    p.add_argument("--out", type=Path, help="histogram CSV")
    p.set_defaults(func=cmd_simprobe)

    p = sub.add_parser("export-attn", help="write FMU attention heatmaps for one image")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_export_attn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        err = {"status": "error", "command": args.command, "type": type(exc).__name__, "message": str(exc)}
        step = getattr(exc, "step", None)
        if step is not None:
            err["step"] = step
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
