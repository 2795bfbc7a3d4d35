"""Command line entry points.

Exit codes: 0 success; 2 usage or configuration problems (bad flags, bad
config values, malformed inputs); 3 file problems (missing or unreadable
files, unwritable output, corrupt checkpoints, held run locks); 4 numeric
faults.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import ModelParams, decode, encode
from .dataio import generate_synthetic, load_image, load_manifest, save_png
from .downstream import ProbeConfig, linear_probe, reid_report
from .errors import (
    CheckpointError,
    ConfigError,
    InputError,
    NumericError,
    ParameterError,
    ParseError,
    StructuralError,
)
from .pretrainer import (
    LossToggles,
    RunConfig,
    load_checkpoint,
    pretrain,
    read_metrics_log,
)
from .tokenizer import embed_patches, patchify, sample_mask, unpatchify

ABLATION_LOSS_GRID = [
    ("recon", LossToggles(True, False, False, False, False)),
    ("recon_mim", LossToggles(True, True, False, False, False)),
    ("recon_mim_cls", LossToggles(True, True, True, False, False)),
    ("recon_cs", LossToggles(True, False, False, False, True)),
    ("recon_cs_cf", LossToggles(True, False, False, True, True)),
    ("all", LossToggles(True, True, True, True, True)),
]
ABLATION_RATIO_GRID = [0.25, 0.5, 0.75, 0.85]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vmae", description="Masked vehicle autoencoder toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic vehicle dataset")
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=32, help="image side length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--caption-frac", type=float, default=0.3)
    p.add_argument("--identities", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run or resume pre-training")
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("ablate", help="run an ablation grid of short pretrains")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", choices=("losses", "ratios"), default="losses")
    p.add_argument("--probe-epochs", type=int, default=30)
    p.add_argument("--probe-lr", type=float, default=None, help="override probe lr")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a downstream task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("attribute", "fine_grained", "reid"), required=True)
    p.add_argument("--out", default=None, help="optional report file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-epochs", type=int, default=30)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="write a reconstruction panel for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, default=None, help="override mask ratio")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reconstruct)
    return parser


def cmd_gen_data(args) -> int:
    manifest = generate_synthetic(
        n=args.n,
        out_dir=args.out,
        image_size=args.size,
        seed=args.seed,
        caption_fraction=args.caption_frac,
        n_identities=args.identities,
    )
    n_cap = sum(1 for r in manifest.records if r.caption is not None)
    print(f"wrote {len(manifest)} records ({n_cap} captioned) to {manifest.root / 'manifest.tsv'}")
    return 0


def cmd_pretrain(args) -> int:
    run = RunConfig.from_yaml(args.config)
    manifest = load_manifest(args.data)
    final = pretrain(run, manifest, args.out)
    log = Path(args.out) / "metrics.log"
    if log.exists():
        rows = read_metrics_log(log)
        if rows:
            last = rows[-1]
            print(
                f"step {int(last['step'])}: total {last['total']:.6f} "
                f"(l_r {last['l_r']:.6f})"
            )
    print(f"final checkpoint: {final}")
    return 0


def _cell_summary(out_dir: Path) -> dict[str, float]:
    rows = read_metrics_log(out_dir / "metrics.log")
    return rows[-1] if rows else {}


def cmd_ablate(args) -> int:
    run = RunConfig.from_yaml(args.config)
    manifest = load_manifest(args.data)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    cells = []
    if args.grid == "losses":
        for name, toggles in ABLATION_LOSS_GRID:
            cells.append((name, replace(run, toggles=toggles)))
    else:
        for ratio in ABLATION_RATIO_GRID:
            name = f"ratio_{int(round(ratio * 100)):03d}"
            cells.append((name, replace(run, model=run.model.with_overrides(mask_ratio=ratio))))
    probe_kwargs = {"seed": run.seed, "epochs": args.probe_epochs}
    if args.probe_lr is not None:
        probe_kwargs["lr"] = args.probe_lr
    probe_cfg = ProbeConfig(**probe_kwargs)
    lines = ["cell\tl_r\tl_mim\tl_cls\tl_cf\tl_cs\ttotal\tprobe_mA\tprobe_accuracy"]
    for name, cell_run in cells:
        cell_dir = root / name
        final = pretrain(cell_run, manifest, cell_dir)
        state = load_checkpoint(final)
        report = linear_probe(state.params, manifest, "attribute", probe_cfg)
        last = _cell_summary(cell_dir)
        lines.append(
            "\t".join(
                [name]
                + [f"{last.get(k, float('nan')):.6g}" for k in
                   ("l_r", "l_mim", "l_cls", "l_cf", "l_cs", "total")]
                + [f"{report.values['mA']:.6f}", f"{report.values['accuracy']:.6f}"]
            )
        )
        print(lines[-1])
    (root / "ablation.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"ablation table: {root / 'ablation.tsv'}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    if args.task == "reid":
        report = reid_report(state.params, manifest)
    else:
        report = linear_probe(
            state.params,
            manifest,
            args.task,
            ProbeConfig(seed=args.seed, epochs=args.probe_epochs),
        )
    sys.stdout.write(report.to_text())
    if args.out:
        report.save(args.out)
        print(f"report written to {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    state = load_checkpoint(args.checkpoint)
    params = state.params
    if args.ratio is not None:
        params = ModelParams(
            config=params.config.with_overrides(mask_ratio=args.ratio),
            tensors=params.tensors,
        )
    cfg = params.config
    image = load_image(args.image)
    if image.shape[0] != cfg.image_size or image.shape[1] != cfg.image_size:
        raise InputError(
            f"image is {image.shape[0]}x{image.shape[1]}, checkpoint expects "
            f"{cfg.image_size}x{cfg.image_size}"
        )
    patches = patchify(image, cfg.patch_size)
    mask = sample_mask(cfg.n_patches, cfg.mask_ratio, args.seed)
    tokens = embed_patches(patches, mask, params)
    bundle = decode(encode(tokens, params), mask, params)

    grid = patches.patches.copy()
    masked_view = grid.copy()
    masked_view[mask.masked_idx] = 0.5
    filled = grid.copy()
    pred_patches = bundle.pixel_pred.reshape(-1, cfg.patch_size, cfg.patch_size, 3)
    filled[mask.masked_idx] = np.clip(pred_patches, 0.0, 1.0)
    err = np.zeros_like(grid)
    per_pixel = ((pred_patches - grid[mask.masked_idx]) ** 2).mean(axis=3, keepdims=True)
    peak = per_pixel.max()
    if peak > 0:
        per_pixel = per_pixel / peak
    err[mask.masked_idx] = np.repeat(per_pixel, 3, axis=3)

    panels = []
    for arr in (grid, masked_view, filled, err):
        view = replace(patches, patches=arr)
        panels.append(unpatchify(view))
    save_png(args.out, np.concatenate(panels, axis=1))
    print(f"panel written to {args.out} (original | masked | filled | error)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.func(args)
    except (ParseError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ParameterError, InputError, StructuralError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
