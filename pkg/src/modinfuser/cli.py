"""``modinfuser`` command line.

Exit codes: 0 ok, 64 usage, 2 invalid phantom spec, 3 training diverged,
4 modality mismatch, 5 empty pack, 6 too few rows for PCA, 1 other I/O errors.
Diagnostics go to stderr; stdout carries data only.
"""

from __future__ import annotations

import os

_threads = os.environ.get("MF_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import tensor as T  # noqa: E402
from .config import ConfigError, RunConfig, load_config  # noqa: E402
from .data import (  # noqa: E402
    SlicePack,
    SlicePackError,
    filter_slices,
    generate_phantom,
    import_pngs,
    read_pack,
    split_subjects,
    write_manifest,
    write_pack,
)
from .metrics import (  # noqa: E402
    conditioned_features,
    evaluate_pack,
    identity_translate,
    linear_probe_accuracy,
    pca_project,
    silhouette,
)
from .model import CheckpointError, MEMode, load_models  # noqa: E402
from .train import TrainingDiverged, fit, run_ablation  # noqa: E402

log = logging.getLogger("modinfuser")

EXIT_USAGE = 64
EXIT_SPEC = 2
EXIT_DIVERGED = 3
EXIT_MODALITY = 4
EXIT_EMPTY = 5
EXIT_PCA = 6
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


class CommandError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def to_png_bytes(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to uint8 via ``round((v+1)/2*255)``, clamped."""
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)


def from_png_bytes(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0 * 2.0 - 1.0


def _read_pack(path) -> SlicePack:
    try:
        return read_pack(path)
    except FileNotFoundError:
        raise CommandError(f"no such pack: {path}") from None
    except SlicePackError as exc:
        raise CommandError(str(exc)) from None


def _load(path):
    try:
        return load_models(path)
    except FileNotFoundError:
        raise CommandError(f"no such checkpoint: {path}") from None
    except CheckpointError as exc:
        raise CommandError(str(exc)) from None


def _three_way(pack: SlicePack, seed: int) -> tuple[SlicePack, SlicePack, SlicePack]:
    if len(pack) == 0:
        raise CommandError("pack is empty after filtering (see --min-pixels)", EXIT_EMPTY)
    try:
        return split_subjects(pack, SPLIT_FRACTIONS, seed)
    except ValueError as exc:
        raise CommandError(f"cannot split by subject: {exc}", EXIT_EMPTY) from None


def _split(pack: SlicePack, part: str, seed: int, min_pixels: int = 2000) -> SlicePack:
    if part == "all":
        return pack
    tr, va, te = _three_way(filter_slices(pack, min_pixels), seed)
    return {"train": tr, "val": va, "test": te}[part]


def _ckpt_modalities(gen, meta, fallback=None) -> list[str]:
    if "modalities" in meta:
        return meta["modalities"].split(",")
    if fallback is not None and len(fallback) == gen.cfg.modalities:
        return list(fallback)
    return [str(i) for i in range(gen.cfg.modalities)]


def _modality_index(names: list[str], value: str, flag: str) -> int:
    if value in names:
        return names.index(value)
    if value.isdigit() and int(value) < len(names):
        return int(value)
    raise CommandError(f"{flag} {value!r} is not one of the checkpoint's modalities {names}", EXIT_MODALITY)


# commands ---------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    path = getattr(args, "config", None) or getattr(args, "spec", None)
    try:
        return load_config(path) if path else RunConfig()
    except ConfigError as exc:
        raise CommandError(str(exc), EXIT_USAGE) from None


def cmd_gen_data(args) -> int:
    rc = _run_config(args)
    spec = rc.phantom
    for key in ("seed", "size", "noise_sigma", "lesion_prob"):
        if getattr(args, key) is not None:
            spec = replace(spec, **{key: getattr(args, key)})
    if args.subjects < 1 or args.slices < 1:
        raise CommandError("--subjects and --slices must be positive", EXIT_SPEC)
    try:
        pack = generate_phantom(spec, args.subjects, args.slices)
    except ValueError as exc:
        raise CommandError(f"invalid phantom spec: {exc}", EXIT_SPEC) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pack(pack, out)
    manifest = Path(args.manifest) if args.manifest else out.with_suffix(".csv")
    write_manifest(pack, manifest)
    print(out)
    print(manifest)
    return 0


def cmd_import_pngs(args) -> int:
    names = [s for s in args.modalities.split(",") if s]
    if len(names) < 2:
        raise CommandError("--modalities needs at least two comma-separated names", EXIT_USAGE)
    try:
        pack = import_pngs(args.root, names, args.lo, args.hi, args.clip_percentile)
    except (FileNotFoundError, ValueError) as exc:
        raise CommandError(str(exc)) from None
    if args.filter:
        pack = filter_slices(pack, args.min_pixels)
    write_pack(pack, args.out)
    write_manifest(pack, Path(args.out).with_suffix(".csv"))
    print(args.out)
    return 0


def _train_config(args, rc: RunConfig):
    cfg = rc.train
    overrides = {
        "mode": args.me_mode,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr_g": args.lr_g,
        "lr_d": args.lr_d,
        "seed": args.seed,
        "clip_norm": args.clip_norm,
        "max_steps": args.max_steps,
        "lr_schedule": args.lr_schedule,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.disen_detach:
        cfg = replace(cfg, disen_detach=True)
    return cfg


def cmd_train(args) -> int:
    rc = _run_config(args)
    cfg = _train_config(args, rc)
    data = args.data or rc.paths.get("data")
    out = args.out or rc.paths.get("out") or "runs/train"
    resume = args.resume or rc.paths.get("resume")
    if not data:
        raise CommandError("train: --data is required", EXIT_USAGE)
    pack = _read_pack(data)
    keep = lambda p: filter_slices(p, args.min_pixels)  # noqa: E731
    if args.val:
        train, val = keep(pack), keep(_read_pack(args.val))
    else:
        train, val, _ = _three_way(keep(pack), args.split_seed)
    if len(train) == 0:
        raise CommandError("training pack is empty after filtering", EXIT_EMPTY)
    notes = {f"run.{sec}.{k}": v for sec, body in rc.as_sections().items() if sec in ("phantom", "paths") for k, v in body.items()}
    notes.update({"run.data": str(data), "run.split_seed": str(args.split_seed)})
    try:
        res = fit(train, val, cfg, out, resume=resume, notes=notes)
    except TrainingDiverged as exc:
        raise CommandError(f"training aborted: {exc}", EXIT_DIVERGED) from None
    print(f"out={res.out_dir}")
    print(f"epochs={res.epochs_done}")
    print(f"steps={res.steps}")
    print(f"best_val_l1={res.best_val!r}")
    return 0


def _write_png(path: Path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_png_bytes(img), mode="L").save(path)


def cmd_synthesize(args) -> int:
    gen, _, _, meta = _load(args.ckpt)
    inp = Path(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if inp.suffix.lower() == ".png":
        from PIL import Image

        try:
            img = np.asarray(Image.open(inp).convert("L"))
        except OSError as exc:
            raise CommandError(f"cannot read {inp}: {exc}") from None
        names = _ckpt_modalities(gen, meta)
        slices = from_png_bytes(img)[None]
        stems = [inp.stem]
    else:
        pack = _read_pack(inp)
        names = _ckpt_modalities(gen, meta, pack.modalities)
        if list(pack.modalities) != names:
            raise CommandError(f"pack modalities {pack.modalities} do not match checkpoint {names}", EXIT_MODALITY)
        if len(pack) == 0:
            raise CommandError("input pack is empty", EXIT_EMPTY)
        slices = pack.images[:, _modality_index(names, args.source, "--source")]
        stems = [f"{s}_{z:03d}" for s, z in zip(pack.subjects, pack.slice_index)]
    src = _modality_index(names, args.source, "--source")
    if args.target == "all":
        targets = [t for t in range(len(names)) if t != src]
    else:
        targets = [_modality_index(names, args.target, "--target")]
    h, w = slices.shape[1:]
    if h % 16 or w % 16:
        raise CommandError(f"input size {h}x{w} is not a multiple of 16")
    with T.no_grad():
        for t in targets:
            fake = gen.translate(T.Tensor(slices[:, None]), np.full(len(slices), t)).data[:, 0]
            for stem, img in zip(stems, fake):
                path = out / f"{stem}_{names[src]}2{names[t]}.png"
                _write_png(path, img)
                print(path)
    return 0


def cmd_evaluate(args) -> int:
    pack = _split(_read_pack(args.data), args.split, args.split_seed, args.min_pixels)
    if len(pack) == 0:
        raise CommandError("evaluation pack is empty", EXIT_EMPTY)
    if args.identity:
        model = identity_translate
    else:
        if not args.ckpt:
            raise CommandError("evaluate: --ckpt or --identity is required", EXIT_USAGE)
        gen, _, _, meta = _load(args.ckpt)
        names = _ckpt_modalities(gen, meta, pack.modalities)
        if list(pack.modalities) != names:
            raise CommandError(f"pack modalities {pack.modalities} do not match checkpoint {names}", EXIT_MODALITY)
        model = gen
    report = evaluate_pack(model, pack)
    report.write_csv(args.out)
    if args.per_slice:
        report.write_per_slice_csv(args.per_slice)
    with open(args.out) as fh:
        sys.stdout.write(fh.read())
    return 0


_PALETTE = [(90, 90, 90), (228, 26, 28), (55, 126, 184), (77, 175, 74), (152, 78, 163), (255, 127, 0), (166, 86, 40)]


def scatter_png(path, coords: np.ndarray, labels: list[str], size: int = 512) -> None:
    """Plain scatter plot, one colour per label, with a small legend."""
    from PIL import Image, ImageDraw

    uniq = list(dict.fromkeys(labels))
    img = Image.new("RGB", (size, size), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    lo, hi = coords.min(0), coords.max(0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pix = 20 + (coords - lo) / span * (size - 40)
    for (x, y), lab in zip(pix, labels):
        c = _PALETTE[uniq.index(lab) % len(_PALETTE)]
        draw.ellipse([x - 2, size - y - 2, x + 2, size - y + 2], fill=c)
    for i, lab in enumerate(uniq):
        draw.rectangle([6, 6 + 12 * i, 14, 14 + 12 * i], fill=_PALETTE[i % len(_PALETTE)])
        draw.text((18, 4 + 12 * i), lab, fill=(0, 0, 0))
    img.save(path)


def cmd_visualize_features(args) -> int:
    gen, _, _, meta = _load(args.ckpt)
    pack = _split(_read_pack(args.data), args.split, args.split_seed, args.min_pixels)
    names = _ckpt_modalities(gen, meta, pack.modalities)
    if list(pack.modalities) != names:
        raise CommandError(f"pack modalities {pack.modalities} do not match checkpoint {names}", EXIT_MODALITY)
    if len(pack) == 0:
        raise CommandError("pack is empty", EXIT_EMPTY)
    rows, labels = conditioned_features(gen, pack)
    if len(rows) < args.pca_dims:
        need = -(-args.pca_dims // (pack.n_modalities + 1))
        raise CommandError(
            f"{len(rows)} feature rows < {args.pca_dims} PCA dims; need at least {need} slices", EXIT_PCA
        )
    cloud = pca_project(rows, labels, out_dims=args.pca_dims)
    cloud.write_csv(args.out)
    if args.png:
        scatter_png(args.png, cloud.coords2d, labels)
    cond = np.array([lab != "agnostic" for lab in labels])
    score = silhouette(cloud.coords2d, labels)
    print(f"points={len(labels)}")
    print(f"silhouette={score!r}")
    if args.probe:
        x, y = rows[cond], np.array(labels)[cond]
        half = np.arange(len(x)) // pack.n_modalities % 2 == 0
        print(f"probe_accuracy={linear_probe_accuracy(x[half], y[half], x[~half], y[~half])!r}")
    return 0


def cmd_ablate(args) -> int:
    rc = _run_config(args)
    cfg = _train_config(args, rc)
    pack = _read_pack(args.data)
    train, val, _ = _three_way(filter_slices(pack, args.min_pixels), args.split_seed)
    if len(train) == 0 or len(val) == 0:
        raise CommandError("ablation needs non-empty train and val splits", EXIT_EMPTY)
    seeds = [int(s) for s in args.seeds.split(",")]
    modes = args.modes.split(",")
    try:
        modes = [MEMode(m) for m in modes]
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_USAGE) from None
    try:
        rows = run_ablation(train, val, cfg, modes, seeds, args.out)
    except TrainingDiverged as exc:
        raise CommandError(f"training aborted: {exc}", EXIT_DIVERGED) from None
    for r in rows:
        print(",".join(f"{k}={v}" for k, v in r.items()))
    return 0


# parser -----------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--config", help="sectioned key=value run config")
    p.add_argument("--me-mode", choices=[m.value for m in MEMode])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-g", type=float)
    p.add_argument("--lr-d", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr-schedule", choices=["constant", "cosine"], help="cosine decays both rates to 2%% over the run")
    p.add_argument("--clip-norm", type=float, help="clip gradient global norm (off by default)")
    p.add_argument("--disen-detach", action="store_true", help="stop gradients through the translated branch of L_disen")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--min-pixels", type=int, default=2000, help="slice filter threshold (foreground pixels)")


def _add_split_flags(p):
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="all")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--min-pixels", type=int, default=2000)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="modinfuser", description="Multimodal MR translation with a modality infuser.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic phantom pack")
    p.add_argument("--spec", help="config file with a [phantom] section")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="manifest CSV path (default: next to --out)")
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--slices", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--lesion-prob", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("import-pngs", help="build a pack from root/<subject>/<slice>_<modality>.png")
    p.add_argument("--root", required=True)
    p.add_argument("--modalities", required=True, help="comma-separated, e.g. T1,T2,T1ce,FLAIR")
    p.add_argument("--out", required=True)
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p.add_argument("--clip-percentile", type=float)
    p.add_argument("--filter", action="store_true", help="drop slices with too few foreground pixels")
    p.add_argument("--min-pixels", type=int, default=2000)
    p.set_defaults(func=cmd_import_pngs)

    p = sub.add_parser("train", help="fit a translator and discriminator")
    p.add_argument("--data", help="training pack (split by subject unless --val is given)")
    p.add_argument("--val", help="separate validation pack")
    p.add_argument("--out")
    p.add_argument("--resume")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="translate slices to other modalities")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="pack file or single PNG")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True, help="modality name, index or 'all'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score all directed modality pairs")
    p.add_argument("--ckpt")
    p.add_argument("--identity", action="store_true", help="score the copy-input baseline instead of a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-slice")
    _add_split_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize-features", help="PCA of agnostic and conditioned features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV with columns label,x,y")
    p.add_argument("--png")
    p.add_argument("--pca-dims", type=int, default=50)
    p.add_argument("--probe", action="store_true", help="also report linear-probe accuracy on conditioned features")
    _add_split_flags(p)
    p.set_defaults(func=cmd_visualize_features)

    p = sub.add_parser("ablate", help="compare ME modes under one budget")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--modes", default="single,consecutive,learnable,learnable-high-rec")
    p.add_argument("--seeds", default="0")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"modinfuser {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
