"""Two-stage carpet map generation plus colorization.

Stage one is always the patch-swap method seeded with the initial carpet
image and the first style pattern; stage two diversifies with a second,
configurable method; the result is converted to grayscale (the generation
stages produce the map's pattern, not its colors) and a third, configurable
method colorizes it from a color source image or a style text.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import features as ft
from .cams import CamsConfig, run_cams
from .clip_styler import ClipStylerConfig, StyleText, run_clip_styler
from .errors import StageFailureError, ValidationError
from .gatys import GatysConfig, run_gatys
from .image_io import load_image, resize, save_image, to_grayscale
from .style_swap import SwapConfig, run_style_swap

SECOND_METHODS = ("StyleSwap", "Gatys", "ClipStyler")
COLORING_METHODS = ("ClipStyler", "Cams", "Gatys")
CHAIN_ALIASES = {
    "Swap-Gatys": "Gatys",
    "Swap-Swap": "StyleSwap",
    "Swap-Clip": "ClipStyler",
}


@dataclass
class PipelineConfig:
    content: dict
    style1: dict
    style2: dict
    color_source: dict
    second_method: str = "Gatys"
    coloring_method: str = "Gatys"
    seed: int = 0
    resolution: int | None = None
    preview_every: int = 0
    swap: SwapConfig = field(default_factory=SwapConfig)
    gatys: GatysConfig = field(default_factory=GatysConfig)
    cams: CamsConfig = field(default_factory=CamsConfig)
    clip_styler: ClipStylerConfig = field(default_factory=ClipStylerConfig)

    def chain_name(self):
        for alias, method in CHAIN_ALIASES.items():
            if method == self.second_method:
                return alias
        return None


@dataclass
class PipelineArtifacts:
    i_o1: np.ndarray
    i_o2: np.ndarray
    i_final: np.ndarray
    traces: dict
    timings: dict
    config_snapshot: dict


# -- config parsing and validation ------------------------------------------------

_REF_KEYS = {"path", "asset", "text"}

_SECTION_FIELDS = {
    "swap": {"patchSize": "patch_size", "stride": "stride"},
    "gatys": {
        "iterations": "iterations",
        "styleWeight": "style_weight",
        "stepSize": "step_size",
    },
    "cams": {
        "paletteSize": "palette_size",
        "iterations": "iterations",
        "styleWeight": "style_weight",
        "stepSize": "step_size",
        "maskSigma": "mask_sigma",
        "paletteRefresh": "palette_refresh",
    },
    "clipStyler": {
        "iterations": "iterations",
        "cropCount": "crop_count",
        "cropSize": "crop_size",
        "tau": "tau",
        "warpStrength": "warp_strength",
        "wDirection": "w_direction",
        "wPatch": "w_patch",
        "wContent": "w_content",
        "stepSize": "step_size",
    },
}

_TOP_KEYS = {
    "content", "style1", "style2", "colorSource", "secondMethod",
    "coloringMethod", "chain", "seed", "resolution", "previewEvery",
} | set(_SECTION_FIELDS)


def _check_ref(value, fld, errors, allow_text):
    if not isinstance(value, dict) or len(value) != 1 or not (set(value) <= _REF_KEYS):
        errors[fld] = "must be exactly one of {path}, {asset} or {text}"
        return
    key, payload = next(iter(value.items()))
    if not isinstance(payload, str) or not payload.strip():
        errors[fld] = f"{key} must be a non-empty string"
        return
    if key == "text" and not allow_text:
        errors[fld] = "text input is only valid when the stage method is ClipStyler"
    if key != "text" and allow_text:
        errors[fld] = "the ClipStyler stage takes a {text} style prompt, not an image"


def validate_config(doc):
    """Validate a JSON config document; returns {field: message}, empty if ok.

    The same rules run client-side in the designer UI; keep them in sync
    through the shared fixture file.
    """
    errors = {}
    if not isinstance(doc, dict):
        return {"config": "must be a JSON object"}
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        for k in sorted(unknown):
            errors[k] = "unknown field"

    second = doc.get("secondMethod")
    chain = doc.get("chain")
    if chain is not None:
        if chain not in CHAIN_ALIASES:
            errors["chain"] = f"unknown chain (expected one of {sorted(CHAIN_ALIASES)})"
        elif second is not None and CHAIN_ALIASES[chain] != second:
            errors["chain"] = f"chain {chain} conflicts with secondMethod {second}"
        else:
            second = CHAIN_ALIASES[chain]
    if second is None:
        second = "Gatys"
    elif second not in SECOND_METHODS:
        errors["secondMethod"] = f"must be one of {list(SECOND_METHODS)}"

    coloring = doc.get("coloringMethod", "Gatys")
    if coloring not in COLORING_METHODS:
        errors["coloringMethod"] = f"must be one of {list(COLORING_METHODS)}"

    for fld in ("content", "style1"):
        if fld not in doc:
            errors[fld] = "required"
        else:
            _check_ref(doc[fld], fld, errors, allow_text=False)
    if "style2" not in doc:
        errors["style2"] = "required"
    elif "secondMethod" not in errors and "chain" not in errors:
        _check_ref(doc["style2"], "style2", errors, allow_text=second == "ClipStyler")
    if "colorSource" not in doc:
        errors["colorSource"] = "required"
    elif "coloringMethod" not in errors:
        _check_ref(doc["colorSource"], "colorSource", errors,
                   allow_text=coloring == "ClipStyler")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        errors["seed"] = "must be an integer"
    resolution = doc.get("resolution")
    if resolution is not None and (not isinstance(resolution, int)
                                   or isinstance(resolution, bool) or resolution < 32):
        errors["resolution"] = "must be an integer >= 32"
    preview = doc.get("previewEvery", 0)
    if not isinstance(preview, int) or isinstance(preview, bool) or preview < 0:
        errors["previewEvery"] = "must be an integer >= 0"

    for section, fields in _SECTION_FIELDS.items():
        block = doc.get(section)
        if block is None:
            continue
        if not isinstance(block, dict):
            errors[section] = "must be an object"
            continue
        for key in block:
            if key not in fields:
                errors[f"{section}.{key}"] = "unknown field"
        numeric = {k: v for k, v in block.items() if k in fields}
        for key, value in numeric.items():
            if key == "tau" and value is None:
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors[f"{section}.{key}"] = "must be a number"

    if errors:
        return errors

    # range rules, applied through the dataclass validators
    cfg = parse_config(doc)
    for section, obj in (("swap", cfg.swap), ("gatys", cfg.gatys),
                         ("cams", cfg.cams), ("clipStyler", cfg.clip_styler)):
        for fld, msg in obj.validate().items():
            camel = {v: k for k, v in _SECTION_FIELDS[section].items()}.get(fld, fld)
            errors[f"{section}.{camel}"] = msg
    return errors


def parse_config(doc):
    """Build a PipelineConfig from a validated JSON document."""
    second = doc.get("secondMethod")
    if second is None:
        second = CHAIN_ALIASES.get(doc.get("chain"), "Gatys")
    kwargs = {}
    for section, fields in _SECTION_FIELDS.items():
        block = doc.get(section) or {}
        kwargs[section] = {py: block[camel] for camel, py in fields.items() if camel in block}
    return PipelineConfig(
        content=doc["content"],
        style1=doc["style1"],
        style2=doc["style2"],
        color_source=doc["colorSource"],
        second_method=second,
        coloring_method=doc.get("coloringMethod", "Gatys"),
        seed=doc.get("seed", 0),
        resolution=doc.get("resolution"),
        preview_every=doc.get("previewEvery", 0),
        swap=SwapConfig(**kwargs["swap"]),
        gatys=GatysConfig(**kwargs["gatys"]),
        cams=CamsConfig(**kwargs["cams"]),
        clip_styler=ClipStylerConfig(**kwargs["clipStyler"]),
    )


def config_to_doc(cfg):
    """The JSON snapshot of a PipelineConfig (inverse of parse_config)."""
    doc = {
        "content": cfg.content,
        "style1": cfg.style1,
        "style2": cfg.style2,
        "colorSource": cfg.color_source,
        "secondMethod": cfg.second_method,
        "coloringMethod": cfg.coloring_method,
        "seed": cfg.seed,
        "resolution": cfg.resolution,
        "previewEvery": cfg.preview_every,
    }
    for section, fields in _SECTION_FIELDS.items():
        obj = getattr(cfg, {"clipStyler": "clip_styler"}.get(section, section))
        block = {}
        for camel, py in fields.items():
            value = getattr(obj, py)
            if isinstance(value, tuple):
                value = list(value)
            block[camel] = value
        doc[section] = block
    return doc


def default_asset_loader(ref):
    if "path" in ref:
        return load_image(ref["path"])
    raise ValidationError({"asset": f"cannot resolve asset ref {ref!r} outside the service"})


def _round_to_block(img, resolution):
    """Resize so both sides are multiples of 8 (and the long side matches
    ``resolution`` when given); keeps stage dims stable through the decoder."""
    h, w = img.shape[:2]
    if resolution:
        scale = resolution / max(h, w)
        h, w = max(32, round(h * scale)), max(32, round(w * scale))
    h8 = max(32, (h // 8) * 8)
    w8 = max(32, (w // 8) * 8)
    return resize(img, h8, w8)


def _seeded(cfg_obj, seed):
    import copy

    out = copy.copy(cfg_obj)
    out.seed = seed
    return out


def generate(i_c, i_s1, i_s2, second_method, cfg, models, progress=None):
    """Stage chain of Algorithm's generation half: swap, diversify, grayscale.

    i_s2 is an image for StyleSwap/Gatys second stages and a StyleText for
    ClipStyler.  Returns (i_o1, i_o2) with i_o2 grayscale.
    """
    i_s1 = resize(i_s1, *i_c.shape[:2])
    i_o1 = run_style_swap(i_c, i_s1, cfg.swap, models=models,
                          progress=_stage_cb(progress, "swap1"))
    trace = None
    if second_method == "StyleSwap":
        i_s2 = resize(i_s2, *i_o1.shape[:2])
        i_o2 = run_style_swap(i_o1, i_s2, cfg.swap, models=models,
                              progress=_stage_cb(progress, "second"))
    elif second_method == "Gatys":
        i_s2 = resize(i_s2, *i_o1.shape[:2])
        i_o2, trace = run_gatys(i_o1, i_s2, _seeded(cfg.gatys, cfg.seed + 1),
                                encoder=models.encoder,
                                progress=_stage_cb(progress, "second"))
    elif second_method == "ClipStyler":
        i_o2, trace = run_clip_styler(i_o1, i_s2,
                                      _seeded(cfg.clip_styler, cfg.seed + 1),
                                      models=models,
                                      progress=_stage_cb(progress, "second"))
    else:
        raise ValidationError({"secondMethod": f"unknown method {second_method!r}"})
    return i_o1, to_grayscale(i_o2), trace


def colorize(i_o2, i_s3, coloring_method, cfg, models, progress=None):
    """Colorize a grayscale map from an image or a style text."""
    cb = _stage_cb(progress, "colorize")
    if coloring_method == "Gatys":
        i_s3 = resize(i_s3, *i_o2.shape[:2])
        out, trace = run_gatys(i_o2, i_s3, _seeded(cfg.gatys, cfg.seed + 2),
                               encoder=models.encoder, progress=cb)
    elif coloring_method == "Cams":
        i_s3 = resize(i_s3, *i_o2.shape[:2])
        out, trace = run_cams(i_o2, i_s3, _seeded(cfg.cams, cfg.seed + 2),
                              encoder=models.encoder, progress=cb)
    elif coloring_method == "ClipStyler":
        out, trace = run_clip_styler(i_o2, i_s3,
                                     _seeded(cfg.clip_styler, cfg.seed + 2),
                                     models=models, progress=cb)
    else:
        raise ValidationError({"coloringMethod": f"unknown method {coloring_method!r}"})
    return np.clip(out, 0.0, 1.0), trace


def _stage_cb(progress, stage):
    if progress is None:
        return None

    def cb(iteration, loss, image):
        progress(stage, iteration, loss, image)

    return cb


def stage_iteration_counts(cfg):
    """Units of work per stage, used for progress weighting."""
    second = {
        "StyleSwap": 1,
        "Gatys": max(1, cfg.gatys.iterations),
        "ClipStyler": max(1, cfg.clip_styler.iterations),
    }[cfg.second_method]
    coloring = {
        "Gatys": max(1, cfg.gatys.iterations),
        "Cams": max(1, cfg.cams.iterations),
        "ClipStyler": max(1, cfg.clip_styler.iterations),
    }[cfg.coloring_method]
    return {"swap1": 1, "second": second, "colorize": coloring}


def run_pipeline(cfg, models=None, asset_loader=None, out_dir=None, progress=None):
    """Run generation then colorization; persist artifacts as stages finish.

    Returns PipelineArtifacts.  A failing stage raises StageFailureError
    with the stage tag after earlier artifacts have already been written.
    Deterministic for a fixed config and seed.
    """
    doc = config_to_doc(cfg) if isinstance(cfg, PipelineConfig) else dict(cfg)
    errors = validate_config(doc)
    if errors:
        raise ValidationError(errors)
    cfg = parse_config(doc)

    if models is None:
        models = ft.load_models()
    loader = asset_loader or default_asset_loader

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def persist(name, img):
        if out_dir:
            save_image(img, os.path.join(out_dir, name))

    timings, traces = {}, {}

    def staged(stage, fn):
        t0 = time.time()
        try:
            result = fn()
        except ValidationError:
            raise
        except StageFailureError:
            raise
        except Exception as e:
            raise StageFailureError(stage, e) from e
        timings[stage] = time.time() - t0
        return result

    i_c = _round_to_block(loader(cfg.content), cfg.resolution)
    i_s1 = loader(cfg.style1)
    i_s2 = (StyleText(cfg.style2["text"]) if "text" in cfg.style2
            else loader(cfg.style2))
    i_s3 = (StyleText(cfg.color_source["text"]) if "text" in cfg.color_source
            else loader(cfg.color_source))

    def gen():
        return generate(i_c, i_s1, i_s2, cfg.second_method, cfg, models, progress)

    i_o1, i_o2, trace2 = staged("generate", gen)
    traces["second"] = trace2
    persist("i_o1.png", i_o1)
    persist("i_o2.png", i_o2)

    def col():
        return colorize(i_o2, i_s3, cfg.coloring_method, cfg, models, progress)

    i_final, trace3 = staged("colorize", col)
    traces["colorize"] = trace3
    persist("i_final.png", i_final)

    artifacts = PipelineArtifacts(
        i_o1=i_o1, i_o2=i_o2, i_final=i_final,
        traces=traces, timings=timings, config_snapshot=doc,
    )
    if out_dir:
        meta = {
            "config": doc,
            "timings": timings,
            "traces": {k: v for k, v in traces.items() if v is not None},
            "artifacts": ["i_o1.png", "i_o2.png", "i_final.png"],
        }
        tmp = os.path.join(out_dir, ".artifacts.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(meta, fh, indent=2)
        os.replace(tmp, os.path.join(out_dir, "artifacts.json"))
    return artifacts
