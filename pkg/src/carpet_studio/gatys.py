"""Image-optimization style transfer with global Gram statistics.

The output image starts as the content image and is updated by gradient
steps on a weighted sum of a feature-matching content term and a
Gram-discrepancy style term.  Loss functions accept either plain feature
arrays (C,H,W) or graph tensors in the engine's (H,W,C) layout, so the same
formulas serve both testing and the optimization loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import features as ft
from .errors import LayerSetMismatchError, NonFiniteLossError, ShapeMismatchError
from .image_io import ensure_transfer_size

DEFAULT_CONTENT_LAYERS = ("relu4_1", "relu5_1")
DEFAULT_STYLE_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")


@dataclass
class GatysConfig:
    style_weight: float = 100.0
    content_layers: tuple = DEFAULT_CONTENT_LAYERS
    style_layers: tuple = DEFAULT_STYLE_LAYERS
    # low default on purpose; usually needs raising for convergence from scratch
    iterations: int = 10
    step_size: float = 0.05
    seed: int = 0

    def validate(self):
        errors = {}
        if self.iterations < 0:
            errors["iterations"] = "must be >= 0"
        if self.style_weight < 0:
            errors["style_weight"] = "must be >= 0"
        if self.step_size <= 0:
            errors["step_size"] = "must be > 0"
        return errors


def _is_tensor(x):
    return isinstance(x, ad.Tensor)


def _dims(feat):
    """(C, H, W) of a feature map in either public or graph layout."""
    if _is_tensor(feat):
        h, w, c = feat.shape
    else:
        c, h, w = feat.shape
    return c, h, w


def gram_matrix(feat):
    """Channel inner products summed over spatial positions (no normalization).

    Accepts a (C,H,W) array or an (H,W,C) graph tensor; returns C x C.
    """
    if _is_tensor(feat):
        h, w, c = feat.shape
        a = feat.reshape(h * w, c)
        return a.T @ a
    feat = np.asarray(feat)
    c = feat.shape[0]
    a = feat.reshape(c, -1)
    return a @ a.T


def content_loss(f_content, f_output):
    """Half the summed squared feature difference."""
    if f_content.shape != f_output.shape:
        raise ShapeMismatchError(
            f"content features {f_content.shape} vs output {f_output.shape}"
        )
    d = f_content - f_output
    out = ((d ** 2.0).sum()) * 0.5
    return out if _is_tensor(out) else float(out)


def style_layer_normalizer(feat):
    c, h, w = _dims(feat)
    return 1.0 / (4.0 * c * c * (h * w) ** 2)


def style_loss(style_feats, output_feats):
    """Normalized squared Gram discrepancy summed over the style layers."""
    if set(style_feats) != set(output_feats):
        raise LayerSetMismatchError(
            f"style layers {sorted(style_feats)} vs output layers {sorted(output_feats)}"
        )
    total = None
    for layer in sorted(style_feats):
        fs, fo = style_feats[layer], output_feats[layer]
        cs, hs, ws = _dims(fs)
        co, ho, wo = _dims(fo)
        if cs != co:
            raise ShapeMismatchError(
                f"layer {layer}: {cs} style channels vs {co} output channels"
            )
        gs, go = gram_matrix(fs), gram_matrix(fo)
        term = (((gs - go) ** 2.0).sum()) * style_layer_normalizer(fo)
        total = term if total is None else total + term
    return total if _is_tensor(total) else float(total)


def total_loss(l_content, l_style, style_weight):
    """Content term plus weighted style term."""
    return l_content + style_weight * l_style


def run_gatys(content, style, cfg=None, encoder=None, progress=None):
    """Optimize an image to carry the style statistics onto the content.

    Returns (image, loss_trace); the trace holds the total loss of every
    iterate including the initial one, and the returned image is never worse
    than the start (the best iterate is kept as a fallback).  Deterministic
    for a fixed config.
    """
    cfg = cfg or GatysConfig()
    errs = cfg.validate()
    if errs:
        raise ValueError(f"bad config: {errs}")
    content = ensure_transfer_size(content, "content")
    style = ensure_transfer_size(style, "style")
    if encoder is None:
        encoder = ft.load_models().encoder

    style_taps = {
        k: ad.Tensor(v.data) for k, v in
        encoder.encode_t(ad.Tensor(style), list(cfg.style_layers)).items()
    }
    content_taps = {
        k: ad.Tensor(v.data) for k, v in
        encoder.encode_t(ad.Tensor(content), list(cfg.content_layers)).items()
    }
    all_layers = sorted(set(cfg.style_layers) | set(cfg.content_layers))

    x = ad.Tensor(content.copy(), requires_grad=True)
    from .optim import Adam

    opt = Adam([x], lr=cfg.step_size)

    def evaluate():
        taps = encoder.encode_t(x, all_layers)
        l_c = None
        for layer in cfg.content_layers:
            term = content_loss(content_taps[layer], taps[layer])
            l_c = term if l_c is None else l_c + term
        l_s = style_loss({k: style_taps[k] for k in cfg.style_layers},
                         {k: taps[k] for k in cfg.style_layers})
        return total_loss(l_c, l_s, cfg.style_weight)

    trace = []
    best = (np.inf, x.data.copy())
    for it in range(cfg.iterations):
        loss = evaluate()
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLossError(f"total loss {value} at iteration {it}",
                                     iteration=it, value=value)
        trace.append(value)
        if value < best[0]:
            best = (value, x.data.copy())
        opt.zero_grad()
        loss.backward()
        opt.step()
        np.clip(x.data, 0.0, 1.0, out=x.data)
        if progress is not None:
            progress(it, value, x.data)

    final = float(evaluate().data)
    if not np.isfinite(final):
        raise NonFiniteLossError(f"total loss {final} after final step",
                                 iteration=cfg.iterations, value=final)
    trace.append(final)
    out = x.data if final <= best[0] else best[1]
    return out.copy(), trace
