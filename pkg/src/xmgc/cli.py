"""Command-line entry point: ``xmgc <command> ...`` or ``python -m xmgc``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure,
4 artifact-format error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import warnings
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import data_pipeline as dp
from . import evaluation as ev
from . import training
from .training import CheckpointError, NumericalError, TrainingConfig

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_FORMAT = 0, 2, 3, 4
DIRECTION_FLAGS = {"v2t": "visual_to_tactile", "t2v": "tactile_to_visual"}
MODALITIES = ("visual", "tactile")


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    """A training config plus where to read data from and write artifacts to."""
    training: TrainingConfig
    dataset_root: Path | None = None
    manifest: Path | None = None
    output_dir: Path = Path("runs")
    experiment_tag: str = "run"

    RUN_KEYS = ("dataset_root", "manifest", "output_dir", "experiment_tag")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        run = {k: data[k] for k in cls.RUN_KEYS if k in data}
        rest = {k: v for k, v in data.items() if k not in cls.RUN_KEYS}
        try:
            cfg = TrainingConfig.from_dict(rest)
        except KeyError as exc:
            raise UsageError(exc.args[0]) from None
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid training config: {exc}") from None
        for key in ("dataset_root", "manifest", "output_dir"):
            if run.get(key) is not None:
                run[key] = Path(run[key])
        out = cls(cfg, **run)
        if out.manifest is None and out.dataset_root is None:
            raise UsageError("config needs 'manifest' or 'dataset_root'")
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
        run = cls.from_dict(data)
        # relative paths are taken relative to the config file
        for key in ("dataset_root", "manifest", "output_dir"):
            value = getattr(run, key)
            if value is not None and not value.is_absolute():
                setattr(run, key, path.parent / value)
        return run

    def manifest_path(self) -> Path:
        return self.manifest if self.manifest is not None else self.dataset_root / "manifest.csv"

    def run_dir(self) -> Path:
        return self.output_dir / self.experiment_tag


def _parse_synthetic(items: list[str]) -> dict:
    allowed = {"classes": 11, "pairs": 10, "res": 64, "seed": 0}
    out = dict(allowed)
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or key not in allowed:
            raise UsageError(f"--synthetic expects key=value with keys {', '.join(allowed)}; got {item!r}")
        try:
            out[key] = int(value)
        except ValueError:
            raise UsageError(f"--synthetic {key} must be an integer, got {value!r}") from None
    return out


def _out(line: str) -> None:
    print(line, flush=True)


# --- commands ---------------------------------------------------------------------

def cmd_dataset_prepare(args) -> int:
    root = Path(args.root)
    if args.synthetic is not None:
        s = _parse_synthetic(args.synthetic)
        try:
            pairs = dp.make_synthetic_pairs(s["classes"], s["pairs"], s["res"], s["seed"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        manifest = dp.write_synthetic_dataset(root, pairs)
        _out(f"wrote {len(pairs)} synthetic pairs under {root}")
    else:
        if not root.is_dir():
            raise UsageError(f"dataset root {root} is not a readable directory")
        manifest = dp.discover_pairs(root)
    for msg in manifest.warnings:
        warnings.warn(msg)
    if args.roi_manifest:
        manifest = dp.apply_roi_manifest(manifest, args.roi_manifest)
    out = Path(args.manifest) if args.manifest else root / "manifest.csv"
    dp.write_manifest(manifest, out)
    _out(f"manifest={out} rows={len(manifest.rows)}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    cfg = run.training
    if args.direction:
        cfg = dataclasses.replace(cfg, direction=DIRECTION_FLAGS[args.direction])
    manifest = dp.read_manifest(run.manifest_path())
    dataset = dp.load_pairs(manifest, "train")
    resume = training.load_checkpoint(args.resume) if args.resume else None
    out_dir = run.run_dir()
    log_every = max(1, args.log_every)

    def progress(row):
        if row.iteration % log_every == 0 or row.iteration == cfg.iterations:
            _out(f"iter={row.iteration} loss_d={row.loss_d:.6f} loss_g={row.loss_g:.6f} l1={row.loss_l1:.6f}")

    _out(f"training {cfg.direction} on {len(dataset)} pairs for {cfg.iterations} iterations -> {out_dir}")
    training.train(cfg, dataset, out_dir, resume_from=resume, progress=progress)
    _out(f"checkpoint={out_dir / 'final.xmgc'}")
    return EXIT_OK


def _image_dir(path) -> list[Path]:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{path} is not a directory")
    files = [p for p in sorted(path.iterdir()) if p.suffix.lower() in dp.IMAGE_SUFFIXES]
    if not files:
        raise UsageError(f"no images found in {path}")
    return files


def cmd_generate(args) -> int:
    ck = training.load_checkpoint(args.checkpoint)
    res = ck.config.resolution
    files = _image_dir(args.inputs)
    images = []
    for f in files:
        img = dp.load_image(f)
        if img.shape[0] != img.shape[1]:
            raise UsageError(f"{f.name} is {img.shape[1]}x{img.shape[0]}; inputs must be square")
        images.append(dp.resize(img, res))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f, img in zip(files, training.generate(ck, images)):
        dp.save_image(img, out / f"{f.stem}.png")
    _out(f"wrote {len(files)} images to {out}")
    return EXIT_OK


def cmd_eval_ssim(args) -> int:
    mode = "windowed" if args.windowed else "global"
    report = ev.evaluate_experiment_group(args.generated, args.real, mode=mode, csv_path=args.csv)
    first = dp.load_image(Path(args.real) / report.rows[0][0])
    if ev.colour_ssim(first, first, mode=mode).mean != 1.0:
        _out("self-check failed: colour_ssim(x, x) != 1")
        return EXIT_NUMERICAL
    _out(f"images={len(report.rows)} mode={mode}")
    _out(f"mean_colour_ssim={report.mean!r}")
    return EXIT_OK


def _labelled(pairs: list[dp.ImagePair], modality: str, resolution: int) -> list[dp.LabeledImage]:
    return [dp.LabeledImage(dp.resize(getattr(p, modality), resolution), p.class_id, p.source_id)
            for p in pairs]


def _generated_images(directory, resolution: int) -> list[dp.LabeledImage]:
    out = []
    for f in _image_dir(directory):
        try:
            cls, _ = dp.parse_filename(f.name)
        except ValueError:
            raise UsageError(f"cannot read a class id from generated file {f.name}") from None
        out.append(dp.LabeledImage(dp.resize(dp.load_image(f), resolution), cls, f"gen:{f.stem}", True))
    return out


def cmd_eval_classify(args) -> int:
    manifest = dp.read_manifest(args.manifest)
    train_pairs, test_pairs = dp.load_pairs(manifest, "train"), dp.load_pairs(manifest, "test")
    if args.overfit:
        test_pairs = train_pairs
    if not train_pairs or not test_pairs:
        raise UsageError("manifest needs both train and test rows (or pass --overfit)")
    num_classes = max(r.class_id for r in manifest.rows) + 1
    modalities = MODALITIES if args.modality == "both" else (args.modality,)
    table = ev.AccuracyTable([])
    for m in modalities:
        generated = None
        if args.generated:
            gen_dir = Path(args.generated)
            generated = _generated_images(gen_dir / m if args.modality == "both" else gen_dir, args.resolution)
        table = table + ev.classification_protocol(
            _labelled(train_pairs, m, args.resolution), _labelled(test_pairs, m, args.resolution),
            num_classes, args.epochs, seed=args.seed, generated=generated, modality=m,
            require_disjoint=not args.overfit)
    if args.csv:
        Path(args.csv).write_bytes(table.to_csv().encode("utf-8"))
    _out(ev.format_wide(table))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmgc", description="Visual/tactile cross-modal translation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset preparation").add_subparsers(dest="action", required=True)
    prep = ds.add_parser("prepare", help="discover pairs (or synthesize them) and write a manifest")
    prep.add_argument("--root", required=True)
    prep.add_argument("--roi-manifest", help="CSV of tactile_path,roi_x,roi_y,roi_w,roi_h")
    prep.add_argument("--synthetic", nargs="*", metavar="KEY=VALUE",
                      help="write synthetic pairs first: classes=K pairs=P res=R seed=S")
    prep.add_argument("--manifest", help="output path (default <root>/manifest.csv)")
    prep.set_defaults(func=cmd_dataset_prepare)

    tr = sub.add_parser("train", help="train a translation model")
    tr.add_argument("--config", required=True, help="JSON run config")
    tr.add_argument("--direction", choices=sorted(DIRECTION_FLAGS), help="overrides the config's direction")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--log-every", type=int, default=100)
    tr.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", help="translate a directory of images")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--inputs", required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_generate)

    evp = sub.add_parser("eval", help="evaluation").add_subparsers(dest="action", required=True)
    ss = evp.add_parser("ssim", help="Colour-SSIM of generated vs real images, matched by filename")
    ss.add_argument("--generated", required=True)
    ss.add_argument("--real", required=True)
    ss.add_argument("--windowed", action="store_true")
    ss.add_argument("--csv", help="write per-image scores here")
    ss.set_defaults(func=cmd_eval_ssim)

    cl = evp.add_parser("classify", help="real vs real+generated classification accuracy")
    cl.add_argument("--manifest", required=True)
    cl.add_argument("--generated", help="directory of generated images named like the dataset")
    cl.add_argument("--epochs", type=int, required=True)
    cl.add_argument("--modality", choices=(*MODALITIES, "both"), default="visual")
    cl.add_argument("--resolution", type=int, default=64)
    cl.add_argument("--seed", type=int, default=0)
    cl.add_argument("--overfit", action="store_true", help="test on the training rows")
    cl.add_argument("--csv", help="write the long-format table here")
    cl.set_defaults(func=cmd_eval_classify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    threads = os.environ.get("XMGC_THREADS", "1")
    try:
        limit = int(threads)
    except ValueError:
        print(f"error: XMGC_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limit):
            return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CheckpointError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
