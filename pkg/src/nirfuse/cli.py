"""``nirfuse`` command line: synth, train, eval, fuse, gradcheck (and toy).

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
The NIRFUSE_THREADS environment variable caps BLAS threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError, ShapeError

log = logging.getLogger("nirfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.tsv"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _scene_pairs(in_dir: Path):
    """Clean RGB PNGs in ``in_dir`` (sorted) and their ``<stem>_nir.png`` companions."""
    pairs = []
    for p in sorted(in_dir.glob("*.png")):
        if p.stem.endswith("_nir"):
            continue
        nir = p.with_name(f"{p.stem}_nir.png")
        pairs.append((p.stem, p, nir if nir.is_file() else None))
    return pairs


def cmd_synth(args) -> int:
    from .data import NoiseSpec, SceneRecord, get_preset, load_image, save_image, synth_noise, write_manifest
    from .trainer import batch_seed

    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise DataError(f"input directory not found: {in_dir}")
    pairs = _scene_pairs(in_dir)
    if not pairs:
        raise DataError(f"no clean PNG images in {in_dir}")
    preset = get_preset(args.preset)
    spec = preset.noise
    if args.sigma is not None:
        spec = NoiseSpec(args.sigma, args.brightness_scale)
    elif spec is None:
        raise ConfigError(f"preset {args.preset!r} refers to recorded noise and cannot be synthesized; "
                          "pass --sigma")
    else:
        spec = NoiseSpec(spec.sigma, args.brightness_scale)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (sid, clean_path, nir_path) in enumerate(pairs):
        clean = load_image(clean_path)
        if clean.channels != 3:
            raise DataError(f"{clean_path}: clean image must be RGB")
        noisy = synth_noise(clean, spec.with_seed(batch_seed(args.seed, i)))
        noisy_path = out_dir / f"{sid}_{preset.name}.png"
        save_image(noisy, noisy_path, bits=args.bits)
        records.append(SceneRecord(sid, clean_path, nir_path, {preset.name: noisy_path}))
    write_manifest(records, out_dir / MANIFEST)
    print(f"wrote {len(records)} noisy images and {out_dir / MANIFEST}")
    return EXIT_OK


def cmd_toy(args) -> int:
    from .data import NoiseSpec, save_image
    from .toy import make_triples

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr = make_triples(args.n, args.size, NoiseSpec(0.0), seed=args.seed,
                      offset_range=args.offset, mask_fraction=args.mask)
    for i, (c, n) in enumerate(zip(tr.clean, tr.nir)):
        save_image(c, out_dir / f"scene{i:03d}.png")
        save_image(n, out_dir / f"scene{i:03d}_nir.png")
    print(f"wrote {args.n} clean/NIR pairs to {out_dir}")
    return EXIT_OK


def _manifest_path(data_dir) -> Path:
    p = Path(data_dir)
    return p if p.is_file() else p / MANIFEST


def _load_scenes(records, preset):
    from .data import load_scene

    tag = preset.level or preset.name
    return [load_scene(r, tag if tag in r.noisy else None) for r in records]


def cmd_train(args) -> int:
    from .config import RunConfig
    from .data import load_manifest, split_manifest
    from .net import net_init
    from .trainer import SceneDataset, evaluate, load_training_checkpoint, train

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg.apply_overrides(args.set or [])
    preset, spec = cfg.noise()
    records = load_manifest(_manifest_path(args.data_dir))
    train_recs, test_recs = split_manifest(records, cfg["data"]["train_fraction"], cfg["data"]["split_seed"])
    if not train_recs:
        raise DataError("training split is empty")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out / "config.txt")
    (out / "split.txt").write_text("".join(f"train\t{r.scene_id}\n" for r in train_recs)
                                   + "".join(f"test\t{r.scene_id}\n" for r in test_recs))
    tcfg = cfg.train_config()
    state = None
    if args.resume:
        net, state, _ = load_training_checkpoint(args.resume)
    else:
        net = net_init(cfg.net_config())
    log.info("network: %d parameters (%d in fusion modules)", net.param_count(), net.sfm_param_count())
    dataset = SceneDataset(_load_scenes(train_recs, preset), spec, augment=cfg["data"]["augment"])
    result = train(net, dataset, tcfg, state=state, out_dir=out)
    print(f"trained {len(result.curve)} steps; final loss {result.curve[-1][2]:.6f}" if result.curve
          else "nothing to train: checkpoint already at the configured step count")
    if test_recs:
        table = evaluate(net, _load_scenes(test_recs, preset), spec, seed=cfg["noise"]["seed"])
        table.write_csv(out / "eval.csv")
        print(f"held-out mean PSNR {table.mean_psnr:.3f} dB, SSIM {table.mean_ssim:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import NoiseSpec, get_preset, load_manifest
    from .trainer import evaluate

    net, meta, _ = load_checkpoint(args.checkpoint)
    preset = get_preset(args.preset)
    spec = preset.noise
    if args.sigma is not None:
        spec = NoiseSpec(args.sigma)
    records = load_manifest(_manifest_path(args.data_dir))
    table = evaluate(net, _load_scenes(records, preset), spec, seed=args.seed)
    text = "\n".join(table.lines()) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_fuse(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_image, save_image
    from .trainer import denoise

    net, _, _ = load_checkpoint(args.checkpoint)
    rgb = load_image(args.rgb).data[0]
    if rgb.shape[0] != 3:
        raise DataError(f"{args.rgb}: expected an RGB image")
    nir = None
    if net.cfg.fusion_mode != "single":
        if args.nir is None:
            raise ConfigError("this checkpoint fuses NIR guidance; pass a NIR image")
        nir = load_image(args.nir).data[0]
        if nir.shape[0] == 3:
            nir = nir.mean(axis=0, keepdims=True)
        if nir.shape[1:] != rgb.shape[1:]:
            raise DataError(f"NIR size {nir.shape[1:]} differs from RGB size {rgb.shape[1:]}")
    h, w = rgb.shape[1:]
    m = net.cfg.multiple
    ph, pw = (-h) % m, (-w) % m
    pad = ((0, 0), (0, ph), (0, pw))
    if ph or pw:
        rgb = np.pad(rgb, pad, mode="reflect" if min(h, w) > max(ph, pw) else "edge")
        if nir is not None:
            nir = np.pad(nir, pad, mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    out = denoise(net, rgb, nir)[:, :h, :w]
    save_image(out, args.out, bits=args.bits)
    print(f"wrote {args.out} ({w}x{h})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    results = gradcheck.run(args.scope, seed=args.seed, max_elements=args.max_elements, report=print)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} {args.scope} gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .data import PRESETS
    from .gradcheck import SCOPES

    p = _Parser(prog="nirfuse", description="NIR-guided RGB denoising with selective feature fusion.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="add synthetic low-light noise to clean PNGs and write a manifest")
    s.add_argument("--in-dir", required=True, help="directory of clean <id>.png and optional <id>_nir.png")
    s.add_argument("--out-dir", required=True, help="where noisy PNGs and manifest.tsv are written")
    s.add_argument("--preset", default="dvd-sigma4", choices=sorted(PRESETS), help="noise preset")
    s.add_argument("--sigma", type=float, default=None, help="override the preset's noise level (8-bit units)")
    s.add_argument("--brightness-scale", type=float, default=1.0, help="low-light factor in (0, 1]")
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--bits", type=int, default=16, choices=(8, 16), help="PNG bit depth of outputs")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("toy", help="write procedural clean RGB / NIR scene pairs")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--n", type=int, default=10, help="number of scenes")
    s.add_argument("--size", type=int, default=64, help="image side in pixels")
    s.add_argument("--offset", type=float, default=0.0, help="per-scene NIR offset range")
    s.add_argument("--mask", type=float, default=0.0, help="side of the inconsistent NIR region, fraction of size")
    s.add_argument("--seed", type=int, default=0, help="scene seed")
    s.set_defaults(func=cmd_toy)

    s = sub.add_parser("train", help="train a denoiser on a manifest's training split")
    s.add_argument("--config", help="INI config file ([net], [sfm], [noise], [trainer], [data])")
    s.add_argument("--data-dir", required=True, help="directory holding manifest.tsv (or the manifest itself)")
    s.add_argument("--out-dir", required=True, help="run directory for checkpoint, loss curve and config echo")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    s.add_argument("--resume", help="training checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="print per-scene PSNR/SSIM as CSV plus a mean row")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--data-dir", required=True, help="directory holding manifest.tsv (or the manifest itself)")
    s.add_argument("--preset", default="dvd-sigma8", choices=sorted(PRESETS), help="noise preset")
    s.add_argument("--sigma", type=float, default=None, help="override the preset's noise level")
    s.add_argument("--seed", type=int, default=0, help="seed for synthesized noise")
    s.add_argument("--out", help="also write the table to this CSV file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fuse", help="denoise one RGB image with its NIR guide")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("rgb", help="noisy RGB PNG")
    s.add_argument("nir", nargs="?", help="NIR PNG (omit for single-image checkpoints)")
    s.add_argument("out", help="output PNG")
    s.add_argument("--bits", type=int, default=8, choices=(8, 16), help="PNG bit depth of the output")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks; exit 3 on failure")
    s.add_argument("scope", choices=sorted(SCOPES), help="ops, sfm or net")
    s.add_argument("--seed", type=int, default=0, help="random seed for inputs")
    s.add_argument("--max-elements", type=int, default=None, help="subsample elements per tensor")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("NIRFUSE_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (ConfigError, ValueError) as e:
        if isinstance(e, (ShapeError, DataError)):
            print(f"nirfuse: data error: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"nirfuse: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as e:
        print(f"nirfuse: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError) as e:
        print(f"nirfuse: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
