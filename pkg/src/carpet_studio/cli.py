"""The ``carpet`` command line: serve, pipeline, generate, colorize, assets."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import features as ft
from . import pipeline as pl
from .cams import CamsConfig, color_masks, extract_palette, merge_palettes, run_cams
from .clip_styler import ClipStylerConfig, StyleText, run_clip_styler
from .errors import CarpetStudioError
from .gatys import GatysConfig, run_gatys
from .image_io import load_image, save_image, to_grayscale
from .style_swap import SwapConfig, run_style_swap


def _progress_printer(quiet):
    if quiet:
        return None

    def cb(stage, iteration, loss, image):
        if loss is not None:
            print(f"\r[{stage}] iteration {iteration} loss {loss:.4g}    ",
                  end="", file=sys.stderr)

    return cb


def cmd_serve(args):
    from .service.app import serve

    serve(host=args.host, port=args.port, data_dir=args.data_dir,
          model_dir=args.model_dir, worker_count=args.workers)


def cmd_pipeline(args):
    with open(args.config) as fh:
        doc = json.load(fh)
    if args.seed is not None:
        doc["seed"] = args.seed
    errors = pl.validate_config(doc)
    if errors:
        for fld, msg in sorted(errors.items()):
            print(f"config error: {fld}: {msg}", file=sys.stderr)
        return 2
    models = ft.load_models(model_dir=args.model_dir)
    arts = pl.run_pipeline(doc, models=models, out_dir=args.out,
                           progress=_progress_printer(args.quiet))
    print(f"\nwrote i_o1.png, i_o2.png, i_final.png to {args.out}")
    return 0


def _image_or_text(path, text, field):
    if (path is None) == (text is None):
        raise SystemExit(f"exactly one of --{field} or --{field}-text is required")
    return {"text": text} if text else {"path": path}


def cmd_generate(args):
    models = ft.load_models(model_dir=args.model_dir)
    content = load_image(args.content)
    content = pl._round_to_block(content, args.resolution)
    style1 = load_image(args.style1)
    second = args.second_method
    if args.style2_text:
        second = "ClipStyler"
        style2 = StyleText(args.style2_text)
    else:
        if second == "ClipStyler":
            raise SystemExit("ClipStyler second method needs --style2-text")
        style2 = load_image(args.style2)
    cfg = pl.PipelineConfig(
        content={}, style1={}, style2={}, color_source={},
        second_method=second, seed=args.seed,
        swap=SwapConfig(patch_size=args.patch_size, stride=args.stride),
        gatys=GatysConfig(iterations=args.iterations if args.iterations is not None else 10,
                          seed=args.seed),
        clip_styler=ClipStylerConfig(
            iterations=args.iterations if args.iterations is not None else 500,
            seed=args.seed),
    )
    i_o1, i_o2, _ = pl.generate(content, style1, style2, second, cfg, models,
                                progress=_progress_printer(args.quiet))
    os.makedirs(args.out, exist_ok=True)
    save_image(i_o1, os.path.join(args.out, "i_o1.png"))
    save_image(i_o2, os.path.join(args.out, "i_o2.png"))
    print(f"\nwrote i_o1.png and grayscale i_o2.png to {args.out}")
    return 0


def _dump_masks(out_dir, gray, source_img, palette_size):
    """Debug artifacts: palette swatch plus per-color weighting masks."""
    palette = merge_palettes(extract_palette(gray, palette_size),
                             extract_palette(source_img, palette_size))
    swatch = np.repeat(palette[None, :, :], 24, axis=0)
    swatch = np.repeat(swatch, 24, axis=1)
    save_image(swatch.astype(np.float32), os.path.join(out_dir, "palette.png"))
    for label, img in (("output", gray), ("style", source_img)):
        masks = color_masks(img, palette)
        for t in range(masks.shape[0]):
            m = np.repeat(masks[t][:, :, None], 3, axis=2)
            save_image(m, os.path.join(out_dir, f"mask_{label}_{t}.png"))


def cmd_colorize(args):
    models = ft.load_models(model_dir=args.model_dir)
    gray = to_grayscale(load_image(args.input))
    method = args.method
    if args.source_text:
        method = "ClipStyler"
        source = StyleText(args.source_text)
    else:
        if method == "ClipStyler":
            raise SystemExit("ClipStyler coloring needs --source-text")
        source = load_image(args.source)
    iters = {"Gatys": 10, "Cams": 300, "ClipStyler": 500}[method]
    if args.iterations is not None:
        iters = args.iterations
    cfg = pl.PipelineConfig(
        content={}, style1={}, style2={}, color_source={},
        coloring_method=method, seed=args.seed,
        gatys=GatysConfig(iterations=iters, seed=args.seed),
        cams=CamsConfig(iterations=iters, palette_size=args.palette_size, seed=args.seed),
        clip_styler=ClipStylerConfig(iterations=iters, seed=args.seed),
    )
    i_final, _ = pl.colorize(gray, source, method, cfg, models,
                             progress=_progress_printer(args.quiet))
    os.makedirs(args.out, exist_ok=True)
    save_image(i_final, os.path.join(args.out, "i_final.png"))
    if args.dump_masks and method == "Cams":
        from .image_io import resize

        _dump_masks(args.out, gray, resize(source, *gray.shape[:2]), args.palette_size)
    print(f"\nwrote i_final.png to {args.out}")
    return 0


def cmd_assets(args):
    from .service.store import Store

    store = Store(args.data_dir)
    if args.assets_cmd == "add":
        with open(args.file, "rb") as fh:
            rec = store.add_asset(fh.read(), kind=args.kind)
        print(json.dumps({"id": rec["id"], "checksum": rec["checksum"]}, indent=2))
    elif args.assets_cmd == "list":
        import sqlite3  # noqa: F401  (store owns the db; we just print)

        rows = store._db.execute(
            "SELECT id, kind, media_type, byte_size FROM assets ORDER BY created"
        ).fetchall()
        for r in rows:
            print(f"{r['id']}  {r['kind']:8s} {r['media_type']:10s} {r['byte_size']} bytes")
    elif args.assets_cmd == "export":
        data = store.asset_bytes(args.id)
        with open(args.out, "wb") as fh:
            fh.write(data)
        print(f"wrote {len(data)} bytes to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="carpet",
                                description="Carpet map design studio")
    p.add_argument("--model-dir", default=None,
                   help="weights archive directory (default: MODEL_DIR env or stand-ins)")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("serve", help="run the HTTP job service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=int(os.environ.get("PORT", "8675")))
    s.add_argument("--data-dir", default=None)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("pipeline", help="run a full generate+colorize job")
    s.add_argument("--config", required=True, help="job config JSON file")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default="out")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("generate", help="run the two-stage generation only")
    s.add_argument("--content", required=True)
    s.add_argument("--style1", required=True)
    s.add_argument("--style2")
    s.add_argument("--style2-text")
    s.add_argument("--second-method", default="Gatys",
                   choices=sorted(pl.SECOND_METHODS))
    s.add_argument("--patch-size", type=int, default=5)
    s.add_argument("--stride", type=int, default=3)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--resolution", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("colorize", help="colorize a grayscale carpet map")
    s.add_argument("--input", required=True)
    s.add_argument("--source")
    s.add_argument("--source-text")
    s.add_argument("--method", default="Gatys", choices=sorted(pl.COLORING_METHODS))
    s.add_argument("--palette-size", type=int, default=5)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--dump-masks", action="store_true",
                   help="also write palette and weighting mask PNGs (Cams)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_colorize)

    s = sub.add_parser("assets", help="manage the local asset store")
    s.add_argument("--data-dir", default=os.environ.get("DATA_DIR") or os.path.join(
        os.path.expanduser("~"), ".local", "share", "carpet-studio"))
    asub = s.add_subparsers(dest="assets_cmd", required=True)
    a = asub.add_parser("add")
    a.add_argument("file")
    a.add_argument("--kind", default="content",
                   choices=["content", "style", "artifact", "preview"])
    a = asub.add_parser("list")
    a = asub.add_parser("export")
    a.add_argument("id")
    a.add_argument("--out", required=True)
    s.set_defaults(func=cmd_assets)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except CarpetStudioError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
