"""Text-guided stylization through a lightweight trainable image network.

A small encoder/residual/decoder CNN is trained per run so that the change
of the output image in embedding space aligns with the change from a
content text to a style text; a crop-level variant of the same alignment
loss adds local texture pressure, and a feature-matching content term keeps
the structure.  The embedder only needs to map images and texts into a
shared unit-norm space, so the deterministic stub embedder is enough to
drive and test the whole loop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import features as ft
from .errors import NonFiniteLossError
from .gatys import content_loss
from .image_io import ensure_image, ensure_transfer_size

DEGENERATE_NORM = 1e-8


@dataclass
class StyleText:
    style_text: str
    content_text: str = "Photo"

    def validate(self):
        errors = {}
        if not isinstance(self.style_text, str) or not self.style_text.strip():
            errors["style_text"] = "must be a non-empty string"
        if not isinstance(self.content_text, str) or not self.content_text.strip():
            errors["content_text"] = "must be a non-empty string"
        return errors


@dataclass
class ClipStylerConfig:
    iterations: int = 500
    crop_count: int = 64
    crop_size: int = 0  # 0 -> quarter of the smaller image side
    tau: float = None  # None -> 0.7 * mean crop loss, recomputed per step
    warp_strength: float = 0.5
    w_direction: float = 500.0
    w_patch: float = 9000.0
    w_content: float = 150.0
    step_size: float = 1e-3
    seed: int = 0
    content_layers: tuple = ("relu4_1", "relu5_1")

    def validate(self):
        errors = {}
        if self.iterations < 0:
            errors["iterations"] = "must be >= 0"
        if self.crop_count < 1:
            errors["crop_count"] = "must be >= 1"
        if self.crop_size < 0:
            errors["crop_size"] = "must be >= 0"
        if not 0.0 <= self.warp_strength <= 1.0:
            errors["warp_strength"] = "must be in [0, 1]"
        if self.step_size <= 0:
            errors["step_size"] = "must be > 0"
        for name in ("w_direction", "w_patch", "w_content"):
            if getattr(self, name) < 0:
                errors[name] = "must be >= 0"
        return errors


# -- directional loss -------------------------------------------------------------


def direction_alignment_loss(delta_image, delta_text):
    """One minus the cosine between the image-space and text-space changes.

    Works on plain vectors or graph tensors; callers guard degenerate norms.
    """
    di, dt = delta_image, delta_text
    dot = (di * dt).sum()
    ni = ((di * di).sum()) ** 0.5
    nt = ((dt * dt).sum()) ** 0.5
    out = 1.0 - dot * (ni * nt) ** -1.0
    return out if isinstance(out, ad.Tensor) else float(out)


def _directional_term(delta_i, delta_t_const):
    """Graph-side alignment term, regularized so the gradient survives the
    degenerate point (output == content gives value 1 but a live pull along
    the text direction instead of a dead constant)."""
    dt = np.asarray(delta_t_const)
    nt = float(np.linalg.norm(dt))
    if nt < DEGENERATE_NORM:
        return ad.Tensor(np.float64(1.0))
    dot = (delta_i * ad.Tensor((dt / nt).astype(delta_i.dtype))).sum()
    ni = ((delta_i * delta_i).sum() + 1e-24) ** 0.5
    return 1.0 - dot * ((ni + DEGENERATE_NORM) ** -1.0)


def directional_loss(img_content, img_output, text, embedder):
    """Directional alignment between image change and text change.

    Returns 1.0 (flagged with a warning) when either delta is degenerate,
    e.g. output equals content or the two texts embed identically.
    """
    errs = text.validate()
    if errs:
        raise ValueError(f"bad style text: {errs}")
    e_out = img_output if isinstance(img_output, ad.Tensor) else ad.Tensor(ensure_image(img_output))
    delta_i = embedder.embed_image_t(e_out) - ad.Tensor(
        embedder.embed_image(ensure_image(img_content))
    )
    delta_t = embedder.embed_text(text.style_text) - embedder.embed_text(text.content_text)
    ni = float(np.linalg.norm(delta_i.data))
    nt = float(np.linalg.norm(delta_t))
    if ni < DEGENERATE_NORM or nt < DEGENERATE_NORM:
        warnings.warn("degenerate embedding delta; directional loss pinned to 1")
        return 1.0 if not isinstance(img_output, ad.Tensor) else ad.Tensor(np.float64(1.0))
    out = direction_alignment_loss(delta_i, ad.Tensor(delta_t.astype(delta_i.dtype)))
    return out if isinstance(img_output, ad.Tensor) else float(out.data)


# -- perspective crops -------------------------------------------------------------


def _homography(dst_pts, src_pts):
    """3x3 map sending dst (u,v) to src (x,y); 4 point pairs, least squares."""
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((u, v), (x, y)) in enumerate(zip(dst_pts, src_pts)):
        a[2 * i] = [u, v, 1, 0, 0, 0, -u * x, -v * x]
        rhs[2 * i] = x
        a[2 * i + 1] = [0, 0, 0, u, v, 1, -u * y, -v * y]
        rhs[2 * i + 1] = y
    h = np.linalg.solve(a, rhs)
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def sample_crop_coords(rng, img_h, img_w, crop_size, warp_strength):
    """Seeded crop box with perspective-jittered corners -> sample coordinates.

    Returns (ys, xs) arrays of shape (crop_size, crop_size) addressing the
    source image.
    """
    cs = crop_size
    r0 = int(rng.integers(0, img_h - cs + 1))
    c0 = int(rng.integers(0, img_w - cs + 1))
    corners = np.array([
        [r0, c0],
        [r0, c0 + cs - 1],
        [r0 + cs - 1, c0],
        [r0 + cs - 1, c0 + cs - 1],
    ], dtype=np.float64)
    jitter = rng.uniform(-warp_strength * cs / 2.0, warp_strength * cs / 2.0,
                         size=(4, 2))
    src = corners + jitter
    dst = np.array([[0, 0], [0, cs - 1], [cs - 1, 0], [cs - 1, cs - 1]], dtype=np.float64)
    hmat = _homography([(p[1], p[0]) for p in dst], [(p[1], p[0]) for p in src])
    vs, us = np.meshgrid(np.arange(cs, dtype=np.float64),
                         np.arange(cs, dtype=np.float64), indexing="ij")
    denom = hmat[2, 0] * us + hmat[2, 1] * vs + hmat[2, 2]
    xs = (hmat[0, 0] * us + hmat[0, 1] * vs + hmat[0, 2]) / denom
    ys = (hmat[1, 0] * us + hmat[1, 1] * vs + hmat[1, 2]) / denom
    return ys, xs


def aggregate_patch_losses(values, tau):
    """Mean of the crop losses above the neutralization threshold.

    Crops whose loss is at or below tau count as over-stylized and are
    dropped; with nothing left the aggregate is 0.  Order-independent.
    """
    kept = [v for v in values if v > tau]
    if not kept:
        return 0.0
    return float(sum(kept) / len(kept))


def _crop_losses(output_t, content, text, cfg, embedder, rng):
    """Per-crop alignment losses as graph tensors plus their float values."""
    h, w = content.shape[:2]
    cs = cfg.crop_size or max(2, min(h, w) // 4)
    if cs > h or cs > w:
        raise ValueError(f"crop size {cs} exceeds image dims {h}x{w}")
    delta_t = embedder.embed_text(text.style_text) - embedder.embed_text(text.content_text)
    content_t = ad.Tensor(content)
    tensors, values = [], []
    degenerate = False
    for _ in range(cfg.crop_count):
        ys, xs = sample_crop_coords(rng, h, w, cs, cfg.warp_strength)
        crop_out = ad.grid_sample_bilinear(output_t, ys, xs)
        crop_src = ad.grid_sample_bilinear(content_t, ys, xs)
        delta_i = embedder.embed_image_t(crop_out) - ad.Tensor(
            embedder.embed_image_t(crop_src).data
        )
        if float(np.linalg.norm(delta_i.data)) < DEGENERATE_NORM:
            degenerate = True
        term = _directional_term(delta_i, delta_t)
        tensors.append(term)
        values.append(float(term.data))
    if degenerate:
        warnings.warn("degenerate crop deltas; affected crop losses pinned to 1")
    return tensors, values


def patch_clip_loss(output, content, text, cfg, embedder):
    """Crop-level alignment loss with over-stylization neutralization.

    Seeded crop sampling (cfg.seed), perspective warp per crop, per-crop
    directional loss between the warped output crop and the same warped
    content crop; crops at or below the threshold are neutralized and the
    rest averaged.
    """
    errs = text.validate()
    if errs:
        raise ValueError(f"bad style text: {errs}")
    output_arr = ensure_image(output)
    content = ensure_image(content)
    if output_arr.shape != content.shape:
        raise ValueError("output and content dims must match")
    rng = np.random.default_rng(cfg.seed)
    _, values = _crop_losses(ad.Tensor(output_arr), content, text, cfg, embedder, rng)
    tau = cfg.tau if cfg.tau is not None else 0.7 * float(np.mean(values))
    return aggregate_patch_losses(values, tau)


# -- the trainable network ----------------------------------------------------------


class StylerNetwork:
    """Small down/residual/up CNN with a zero-initialized residual gate.

    The gate makes the initial mapping the identity; the sigmoid head and a
    final clamp keep outputs in [0,1] at every training step.
    """

    DOWN = ((3, 16), (16, 32), (32, 48))
    RES = 3
    UP = ((48, 32), (32, 16), (16, 3))

    def __init__(self, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.params = []
        self._convs = {}

        def make_conv(name, c_in, c_out):
            scale = np.sqrt(2.0 / (9 * c_in))
            w = ad.Tensor((rng.standard_normal((3, 3, c_in, c_out)) * scale).astype(dtype),
                          requires_grad=True)
            b = ad.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
            self._convs[name] = (w, b)
            self.params += [w, b]

        for i, (ci, co) in enumerate(self.DOWN):
            make_conv(f"down{i}", ci, co)
        for i in range(self.RES):
            make_conv(f"res{i}a", 48, 48)
            make_conv(f"res{i}b", 48, 48)
        for i, (ci, co) in enumerate(self.UP):
            make_conv(f"up{i}", ci, co)
        self.gate = ad.Tensor(np.zeros(3, dtype=dtype), requires_grad=True)
        self.params.append(self.gate)

    def _conv(self, name, x, stride=1):
        w, b = self._convs[name]
        return ad.conv2d(x, w, b, stride=stride, pad=1)

    def forward(self, x):
        h, w = x.shape[0], x.shape[1]
        t = x
        for i in range(len(self.DOWN)):
            t = ad.relu(self._conv(f"down{i}", t, stride=2))
        for i in range(self.RES):
            r = ad.relu(self._conv(f"res{i}a", t))
            t = t + self._conv(f"res{i}b", r)
        for i in range(len(self.UP)):
            t = ad.upsample_nearest(t, 2)
            t = self._conv(f"up{i}", t)
            if i < len(self.UP) - 1:
                t = ad.relu(t)
        if t.shape[:2] != (h, w):
            t = ad.resize_bilinear(t, h, w)
        styled = ad.sigmoid(t)
        return ad.clip01(x + self.gate * (styled - x))


def run_clip_styler(content, text, cfg=None, models=None, progress=None):
    """Train the styler network on one image under the text-alignment losses.

    Returns (image, loss_trace).  Deterministic for a fixed seed: network
    init and crop sampling both derive from cfg.seed.
    """
    cfg = cfg or ClipStylerConfig()
    errs = cfg.validate()
    if errs:
        raise ValueError(f"bad config: {errs}")
    terrs = text.validate()
    if terrs:
        raise ValueError(f"bad style text: {terrs}")
    content = ensure_transfer_size(content, "content")
    if models is None:
        models = ft.load_models()
    encoder, embedder = models.encoder, models.embedder

    content_t = ad.Tensor(content)
    content_taps = {
        k: ad.Tensor(v.data) for k, v in
        encoder.encode_t(content_t, list(cfg.content_layers)).items()
    }
    content_embedding = ad.Tensor(embedder.embed_image(content))
    delta_t = embedder.embed_text(text.style_text) - embedder.embed_text(text.content_text)
    nt = float(np.linalg.norm(delta_t))
    if nt < DEGENERATE_NORM:
        warnings.warn("style and content texts embed identically; direction is degenerate")

    net = StylerNetwork(seed=cfg.seed)
    from .optim import Adam

    opt = Adam(net.params, lr=cfg.step_size)
    rng = np.random.default_rng(cfg.seed + 1)

    trace = []
    for it in range(cfg.iterations):
        y = net.forward(content_t)

        delta_i = embedder.embed_image_t(y) - content_embedding
        l_dir = _directional_term(delta_i, delta_t)

        crop_tensors, crop_values = _crop_losses(y, content, text, cfg, embedder, rng)
        tau = cfg.tau if cfg.tau is not None else 0.7 * float(np.mean(crop_values))
        kept = [t for t, v in zip(crop_tensors, crop_values) if v > tau]
        if kept:
            l_patch = kept[0]
            for t in kept[1:]:
                l_patch = l_patch + t
            l_patch = l_patch * (1.0 / len(kept))
        else:
            l_patch = ad.Tensor(np.float64(0.0))

        taps = encoder.encode_t(y, list(cfg.content_layers))
        l_content = None
        for layer in cfg.content_layers:
            term = content_loss(content_taps[layer], taps[layer])
            l_content = term if l_content is None else l_content + term

        loss = (cfg.w_direction * l_dir + cfg.w_patch * l_patch
                + cfg.w_content * l_content)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLossError(f"total loss {value} at iteration {it}",
                                     iteration=it, value=value)
        trace.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if progress is not None:
            progress(it, value, y.data)

    out = net.forward(content_t).data.astype(np.float32)
    return out, trace
