"""Color-aware multi-style transfer.

Colors are clustered into a palette, each image gets a soft per-color
weighting mask, and the style loss compares Gram matrices of mask-weighted
features color by color, so the texture attached to one color region moves
to the matching color region instead of being smeared globally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

from . import autodiff as ad
from . import features as ft
from .errors import NonFiniteLossError, PaletteMismatchError, ShapeMismatchError
from .gatys import DEFAULT_STYLE_LAYERS, content_loss, gram_matrix, total_loss
from .image_io import ensure_image, ensure_transfer_size

# RGB distance at or below which two palette colors collapse into one.
MERGE_THRESHOLD = 0.1
# Softness of the color-assignment masks, in RGB distance units.
DEFAULT_MASK_SIGMA = 0.25
MAX_PALETTE = 16

DEFAULT_CAMS_CONTENT_LAYERS = ("relu4_1", "relu5_1")


@dataclass
class CamsConfig:
    palette_size: int = 5
    iterations: int = 300
    style_weight: float = 100.0
    step_size: float = 0.05
    seed: int = 0
    mask_sigma: float = DEFAULT_MASK_SIGMA
    palette_refresh: int = 50
    content_layers: tuple = DEFAULT_CAMS_CONTENT_LAYERS
    style_layers: tuple = DEFAULT_STYLE_LAYERS

    def validate(self):
        errors = {}
        if not 1 <= self.palette_size <= MAX_PALETTE:
            errors["palette_size"] = f"must be in [1, {MAX_PALETTE}]"
        if self.iterations < 0:
            errors["iterations"] = "must be >= 0"
        if self.style_weight < 0:
            errors["style_weight"] = "must be >= 0"
        if self.step_size <= 0:
            errors["step_size"] = "must be > 0"
        if self.palette_refresh < 1:
            errors["palette_refresh"] = "must be >= 1"
        return errors


# -- color space ----------------------------------------------------------------


def rgb_to_lab(rgb):
    """sRGB in [0,1] -> CIELAB (D65), vectorized over leading axes."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    m = np.array([
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ])
    xyz = lin @ m.T
    white = np.array([0.95047, 1.0, 1.08883])
    t = xyz / white
    f = np.where(t > (6 / 29) ** 3, np.cbrt(t), t / (3 * (6 / 29) ** 2) + 4 / 29)
    lab = np.empty_like(f)
    lab[..., 0] = 116 * f[..., 1] - 16
    lab[..., 1] = 500 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab):
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f > 6 / 29, f ** 3, 3 * (6 / 29) ** 2 * (f - 4 / 29))
    white = np.array([0.95047, 1.0, 1.08883])
    xyz = t * white
    m_inv = np.array([
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ])
    lin = xyz @ m_inv.T
    rgb = np.where(lin > 0.0031308, 1.055 * np.clip(lin, 0, None) ** (1 / 2.4) - 0.055,
                   12.92 * lin)
    return np.clip(rgb, 0.0, 1.0)


# -- palette --------------------------------------------------------------------


def _luminance(colors):
    return colors @ np.array([0.299, 0.587, 0.114])


def _sort_palette(colors):
    order = np.lexsort((colors[:, 2], colors[:, 1], colors[:, 0], _luminance(colors)))
    return colors[order]


def _collapse(colors, threshold=MERGE_THRESHOLD):
    """Average together any colors closer than the merge threshold."""
    colors = [np.asarray(c, dtype=np.float64) for c in colors]
    while len(colors) > 1:
        n = len(colors)
        best = None
        for i in range(n):
            for j in range(i + 1, n):
                d = float(np.linalg.norm(colors[i] - colors[j]))
                if d <= threshold and (best is None or d < best[0]):
                    best = (d, i, j)
        if best is None:
            break
        _, i, j = best
        merged = (colors[i] + colors[j]) / 2.0
        colors = [c for k, c in enumerate(colors) if k not in (i, j)] + [merged]
    return np.array(colors)


def extract_palette(img, size):
    """Representative colors by seeded k-means in CIELAB space.

    Returns an (n,3) float array of RGB colors in [0,1], n <= size (an image
    with fewer distinct colors after merging yields fewer entries), sorted
    by luminance then RGB.
    """
    if not 1 <= size <= MAX_PALETTE:
        raise ValueError(f"palette size must be in [1, {MAX_PALETTE}]")
    img = ensure_image(img)
    pixels = img.reshape(-1, 3).astype(np.float64)
    distinct = np.unique(pixels, axis=0)
    if len(distinct) <= size:
        centers = distinct
    else:
        lab = rgb_to_lab(pixels)
        if size == 1:
            centers = lab_to_rgb(lab.mean(axis=0)[None, :])
        else:
            cents, labels = kmeans2(lab, size, iter=20, minit="++", seed=123 + size)
            counts = np.bincount(labels, minlength=size)
            cents = cents[counts > 0]
            centers = lab_to_rgb(cents)
    centers = _collapse(np.clip(centers, 0.0, 1.0))
    return _sort_palette(centers)


def merge_palettes(a, b):
    """Union of two palettes with near-duplicates averaged, sorted stably."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    merged = _collapse(np.concatenate([a, b], axis=0))
    return _sort_palette(merged)


# -- weighting masks -------------------------------------------------------------


def color_masks(img, palette, sigma=DEFAULT_MASK_SIGMA):
    """Soft assignment of each pixel to each palette color.

    Returns an (n,H,W) stack aligned with the palette order; the masks of
    every pixel sum to one (softmax over squared RGB distances).
    """
    img = ensure_image(img)
    palette = np.asarray(palette, dtype=np.float64).reshape(-1, 3)
    if len(palette) == 0:
        raise ValueError("palette is empty")
    d2 = ((img[None, :, :, :].astype(np.float64) - palette[:, None, None, :]) ** 2).sum(-1)
    logits = -d2 / (sigma * sigma)
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    return (e / e.sum(axis=0, keepdims=True)).astype(np.float32)


def resize_masks(masks, dims):
    """Bilinear downsample each mask to (h, w), then restore per-pixel sum 1."""
    masks = np.asarray(masks)
    h, w = dims
    if masks.shape[1:] == (h, w):
        return masks.copy()
    rh = ad.resample_matrix(masks.shape[1], h)
    rw = ad.resample_matrix(masks.shape[2], w)
    small = np.einsum("ij,njk,lk->nil", rh, masks.astype(np.float64), rw, optimize=True)
    small = np.clip(small, 0.0, None)
    total = small.sum(axis=0, keepdims=True)
    total[total == 0] = 1.0
    return (small / total).astype(np.float32)


def weighted_gram(feat, mask):
    """Gram matrix of mask-weighted features; mask broadcasts across channels.

    feat: (C,H,W) array or (H,W,C) graph tensor; mask: (H,W).
    """
    mask = np.asarray(mask)
    if isinstance(feat, ad.Tensor):
        h, w, c = feat.shape
        if mask.shape != (h, w):
            raise ShapeMismatchError(f"mask {mask.shape} vs features {(h, w)}")
        weighted = feat * ad.Tensor(mask[:, :, None].astype(feat.dtype))
        return gram_matrix(weighted)
    feat = np.asarray(feat)
    c, h, w = feat.shape
    if mask.shape != (h, w):
        raise ShapeMismatchError(f"mask {mask.shape} vs features {(h, w)}")
    return gram_matrix(feat * mask[None, :, :])


def cams_style_loss(style_feats, output_feats, style_masks, output_masks):
    """Per-color squared Gram discrepancy summed over layers and colors.

    Masks are per-layer stacks already resized to each layer's spatial dims:
    {layer: (n, H_l, W_l)}.  No per-layer normalization is applied; the
    style weight absorbs overall scale.
    """
    if set(style_feats) != set(output_feats):
        raise ShapeMismatchError(
            f"style layers {sorted(style_feats)} vs output layers {sorted(output_feats)}"
        )
    total = None
    for layer in sorted(style_feats):
        sm, om = style_masks[layer], output_masks[layer]
        if len(sm) != len(om):
            raise PaletteMismatchError(
                f"layer {layer}: {len(sm)} style colors vs {len(om)} output colors"
            )
        for t in range(len(sm)):
            gs = weighted_gram(style_feats[layer], sm[t])
            go = weighted_gram(output_feats[layer], om[t])
            term = ((gs - go) ** 2.0).sum()
            total = term if total is None else total + term
    return total if isinstance(total, ad.Tensor) else float(total)


def _mask_set_for_layers(masks, taps):
    """Resize a full-resolution mask stack to each tapped layer's dims."""
    out = {}
    for layer, feat in taps.items():
        if isinstance(feat, ad.Tensor):
            h, w = feat.shape[0], feat.shape[1]
        else:
            h, w = feat.shape[1], feat.shape[2]
        out[layer] = resize_masks(masks, (h, w))
    return out


def run_cams(content, style, cfg=None, encoder=None, progress=None):
    """Color-aware transfer: palettes and masks steer per-color Gram matching.

    The palette merges the output image's colors with the style image's and
    is refreshed (with both mask sets) every ``palette_refresh`` iterations
    because the output drifts.  Returns (image, loss_trace).
    """
    cfg = cfg or CamsConfig()
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

    style_gram_sets = None
    output_mask_sets = None

    def refresh_palette():
        nonlocal style_gram_sets, output_mask_sets
        palette = merge_palettes(
            extract_palette(x.data, cfg.palette_size),
            extract_palette(style, cfg.palette_size),
        )
        sm = color_masks(style, palette, cfg.mask_sigma)
        om = color_masks(x.data, palette, cfg.mask_sigma)
        style_layer_taps = {k: style_taps[k] for k in cfg.style_layers}
        sm_sets = _mask_set_for_layers(sm, style_layer_taps)
        output_mask_sets = _mask_set_for_layers(om, style_layer_taps)
        style_gram_sets = {
            layer: [ad.Tensor(weighted_gram(style_taps[layer], m).data)
                    for m in sm_sets[layer]]
            for layer in cfg.style_layers
        }

    def evaluate():
        taps = encoder.encode_t(x, all_layers)
        l_c = None
        for layer in cfg.content_layers:
            term = content_loss(content_taps[layer], taps[layer])
            l_c = term if l_c is None else l_c + term
        l_s = None
        for layer in cfg.style_layers:
            for t, g_style in enumerate(style_gram_sets[layer]):
                g_out = weighted_gram(taps[layer], output_mask_sets[layer][t])
                term = ((g_style - g_out) ** 2.0).sum()
                l_s = term if l_s is None else l_s + term
        return total_loss(l_c, l_s, cfg.style_weight)

    trace = []
    best = (np.inf, x.data.copy())
    for it in range(cfg.iterations):
        if it % cfg.palette_refresh == 0:
            refresh_palette()
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

    if style_gram_sets is None:
        refresh_palette()
    final = float(evaluate().data)
    trace.append(final)
    out = x.data if final <= best[0] else best[1]
    return out.copy(), trace
