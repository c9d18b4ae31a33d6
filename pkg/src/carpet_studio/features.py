"""Feature backend: layer-tapped encoder, inversion decoder, and embedders.

The encoder exposes named tap points (relu1_1 .. relu5_1 plus the raw
conv4_1 output) and is differentiable with respect to its input through the
autodiff engine, which is what the optimization-based transfer methods rely
on.  The decoder maps swap-layer features back to pixels.  The embedder maps
images and texts into a shared unit-norm space; the default implementation
is a deterministic seeded projection (a stub standing in for a real
text-image model, and the contractual test double for text-guided runs).
"""

from __future__ import annotations

import hashlib
import os
import threading
import warnings

import numpy as np

from . import autodiff as ad
from . import weights as wt
from .errors import (
    EmptyTextError,
    TextTooLongError,
    UnknownLayerError,
    WeightsNotLoadedError,
    WrongLayerError,
)
from .image_io import ensure_image

# Channel statistics of the encoder's pretraining corpus; applied inside
# encode so public images stay in [0,1].
IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

# Tokens, not characters; generous but finite, mirroring fixed-context text encoders.
TEXT_TOKEN_LIMIT = 77


def hwc_to_chw(img):
    return np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1))


def chw_to_hwc(x):
    return np.ascontiguousarray(np.asarray(x).transpose(1, 2, 0))


class EncoderHandle:
    """Layer-tapped convolutional encoder; read-only once constructed."""

    def __init__(self, enc_weights, arch="vgg16", tap_layers=wt.TAP_LAYERS):
        if arch not in wt.ENCODER_ARCHS:
            raise WeightsNotLoadedError(f"unknown encoder arch {arch!r}")
        self.arch = arch
        self.tap_layers = tuple(tap_layers)
        self.entries = wt.ENCODER_ARCHS[arch]
        missing = [e[1] for e in self.entries if e[0] == "conv" and e[1] not in enc_weights]
        if missing:
            raise WeightsNotLoadedError(f"encoder weights missing layers: {missing}")
        self.weights = {
            name: (np.asarray(w), np.asarray(b)) for name, (w, b) in enc_weights.items()
        }
        # spatial downsampling factor at each tap
        self._tap_scale = {}
        scale = 1
        for kind, name, _, _ in self.entries:
            if kind == "pool":
                scale *= 2
            else:
                for tap in (f"relu{name[4:]}", name):
                    self._tap_scale[tap] = scale

    def manifest(self):
        """Named layer -> weight tensor shapes, covering every tap layer."""
        return {name: tuple(w.shape) for name, (w, b) in self.weights.items()}

    def tap_scale(self, layer):
        self._check_layer(layer)
        return self._tap_scale[layer]

    def _check_layer(self, layer):
        if layer not in self.tap_layers:
            raise UnknownLayerError(
                f"layer {layer!r} is not a declared tap (taps: {', '.join(self.tap_layers)})"
            )

    def _depth(self, layer):
        base = layer.replace("relu", "conv")
        for i, (_, name, _, _) in enumerate(self.entries):
            if name == base:
                return i
        raise UnknownLayerError(layer)

    def encode_t(self, x, layers):
        """Graph-building encode: x is an (H,W,3) Tensor, returns {layer: (H_l,W_l,C_l) Tensor}."""
        for layer in layers:
            self._check_layer(layer)
        wanted = set(layers)
        stop = max(self._depth(layer) for layer in layers)
        mean = IMAGE_MEAN.astype(x.dtype)
        std = IMAGE_STD.astype(x.dtype)
        h = (x - ad.Tensor(mean)) * ad.Tensor(1.0 / std)
        taps = {}
        for i, (kind, name, _, _) in enumerate(self.entries):
            if kind == "pool":
                h = ad.avg_pool2d(h, 2)
            else:
                w, b = self.weights[name]
                pre = ad.conv2d(
                    h,
                    ad.Tensor(w.astype(x.dtype, copy=False)),
                    ad.Tensor(b.astype(x.dtype, copy=False)),
                )
                if name in wanted:
                    taps[name] = pre
                h = ad.relu(pre)
                relu_name = "relu" + name[4:]
                if relu_name in wanted:
                    taps[relu_name] = h
            if i >= stop:
                break
        return taps

    def encode(self, img, layers):
        """Encode an H x W x 3 image into {layer: (C,H_l,W_l) feature array}."""
        img = ensure_image(img)
        x = ad.Tensor(img)
        return {k: hwc_to_chw(v.data) for k, v in self.encode_t(x, layers).items()}


class DecoderHandle:
    """Feature-inversion decoder for the swap layer."""

    def __init__(self, dec_weights, arch="vgg16", swap_layer=wt.DEFAULT_SWAP_LAYER):
        self.arch = arch
        self.swap_layer = swap_layer
        self.plan = wt.decoder_plan(arch, swap_layer)
        self.expected_channels = next(
            c_in for kind, name, c_in, _ in self.plan if kind == "conv"
        )
        missing = [
            "dec_" + name for kind, name, _, _ in self.plan
            if kind == "conv" and "dec_" + name not in dec_weights
        ]
        if missing:
            raise WeightsNotLoadedError(f"decoder weights missing stages: {missing}")
        self.weights = dec_weights

    def decode(self, feat, layer=None):
        """Map swap-layer features (C,H,W) back to an H' x W' x 3 image in [0,1]."""
        if layer is not None and layer != self.swap_layer:
            raise WrongLayerError(
                f"decoder inverts {self.swap_layer!r}, got features from {layer!r}"
            )
        x = np.asarray(feat, dtype=np.float32)
        if x.ndim != 3 or x.shape[0] != self.expected_channels:
            raise WrongLayerError(
                f"expected (C={self.expected_channels},H,W) features, got shape {x.shape}"
            )
        x = chw_to_hwc(x)
        convs_left = sum(1 for k, *_ in self.plan if k == "conv")
        for kind, name, _, _ in self.plan:
            if kind == "unpool":
                x = wt._unpool_field(x)
                continue
            w, b = self.weights["dec_" + name]
            x = wt._conv_field(x, w.astype(np.float32), b.astype(np.float32))
            convs_left -= 1
            if convs_left > 0:
                x = np.maximum(x, 0.0)
        img = x * IMAGE_STD + IMAGE_MEAN
        return np.clip(img, 0.0, 1.0).astype(np.float32)


class StubEmbedder:
    """Deterministic hash-to-vector embedder over a shared unit-norm space.

    Image embeddings are a fixed linear projection of a 16x16 bilinear
    thumbnail (plus a bias tap so no image maps to the zero vector), which
    keeps them differentiable; text embeddings hash the string to a seeded
    unit vector.
    """

    THUMB = 16

    def __init__(self, projection=None, dim=wt.DEFAULT_EMBED_DIM, seed=0):
        if projection is None:
            projection = wt.synthesize_embedder_weights(seed, dim)
        self.projection = np.asarray(projection)
        self.dim = self.projection.shape[0]
        self.seed = seed

    def embed_image_t(self, x):
        """Graph-building image embedding: x is an (H,W,3) Tensor in [0,1]."""
        thumb = ad.resize_bilinear(x, self.THUMB, self.THUMB)
        flat = ad.reshape(thumb, (self.THUMB * self.THUMB * 3, 1))
        proj = self.projection.astype(x.dtype)
        core = ad.matmul(ad.Tensor(proj[:, :-1]), flat)
        vec = ad.reshape(core + ad.Tensor(proj[:, -1:]), (self.dim,))
        norm = ad.sqrt(ad.sum_(vec * vec) + 1e-24)
        return vec * (norm ** -1.0)

    def embed_image(self, img):
        img = ensure_image(img)
        return self.embed_image_t(ad.Tensor(img)).data

    def embed_text(self, text):
        if not isinstance(text, str) or not text.strip():
            raise EmptyTextError("style text must be a non-empty string")
        if len(text.split()) > TEXT_TOKEN_LIMIT:
            raise TextTooLongError(
                f"text has {len(text.split())} tokens; limit is {TEXT_TOKEN_LIMIT}"
            )
        digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))
        vec = rng.standard_normal(self.dim)
        return (vec / np.linalg.norm(vec)).astype(self.projection.dtype)


class ModelBundle:
    """Everything the transfer methods need, shareable across concurrent jobs."""

    def __init__(self, encoder, decoder, embedder):
        self.encoder = encoder
        self.decoder = decoder
        self.embedder = embedder


_cache_lock = threading.Lock()
_bundle_cache = {}


def _standin_cache_dir(seed, arch):
    base = os.environ.get("CARPET_CACHE_DIR") or os.path.join(
        os.path.expanduser("~"), ".cache", "carpet-studio"
    )
    return os.path.join(base, f"standin-{arch}-seed{seed}")


def _ensure_standin_archive(seed, arch):
    """Synthesize stand-in archives into the cache dir once per machine."""
    import shutil
    import tempfile

    target = _standin_cache_dir(seed, arch)
    if os.path.exists(os.path.join(target, wt.MANIFEST_NAME)):
        return target
    os.makedirs(os.path.dirname(target), exist_ok=True)
    tmp = tempfile.mkdtemp(prefix="standin-", dir=os.path.dirname(target))
    try:
        wt.export_model_dir(tmp, seed=seed, arch=arch)
        os.rename(tmp, target)
    except OSError:
        # another process won the race; use whatever landed
        shutil.rmtree(tmp, ignore_errors=True)
        if not os.path.exists(os.path.join(target, wt.MANIFEST_NAME)):
            raise
    return target


def load_models(model_dir=None, seed=0, arch="vgg16"):
    """Load a ModelBundle from an archive directory, or synthesize stand-ins.

    Resolution order: explicit ``model_dir`` argument, then the MODEL_DIR
    environment variable, then a per-machine cache of synthesized stand-in
    archives (built on first use; the decoder fit takes a few seconds).
    """
    model_dir = model_dir or os.environ.get("MODEL_DIR") or None
    key = (model_dir, seed, arch)
    with _cache_lock:
        if key in _bundle_cache:
            return _bundle_cache[key]
    if not model_dir:
        try:
            model_dir = _ensure_standin_archive(seed, arch)
        except OSError as e:
            warnings.warn(f"stand-in weight cache unavailable ({e}); synthesizing in memory")
            model_dir = None
    if model_dir:
        loaded = wt.load_model_dir(model_dir)
        encoder = EncoderHandle(loaded["encoder"], loaded["arch"], loaded["tap_layers"])
        decoder = DecoderHandle(loaded["decoder"], loaded["arch"], loaded["swap_layer"])
        embedder = StubEmbedder(projection=loaded["embedder"], seed=seed)
    else:
        enc_weights = wt.synthesize_encoder_weights(seed, arch)
        encoder = EncoderHandle(enc_weights, arch)
        dec_weights = wt.fit_decoder_weights(enc_weights, seed=seed, arch=arch)
        decoder = DecoderHandle(dec_weights, arch)
        embedder = StubEmbedder(seed=seed)
    bundle = ModelBundle(encoder, decoder, embedder)
    with _cache_lock:
        _bundle_cache[key] = bundle
    return bundle


def encoder_only(seed=0, arch="vgg16"):
    """Encoder without the decoder fit; enough for the optimization methods."""
    key = ("__encoder_only__", seed, arch)
    with _cache_lock:
        if key in _bundle_cache:
            return _bundle_cache[key]
    encoder = EncoderHandle(wt.synthesize_encoder_weights(seed, arch), arch)
    with _cache_lock:
        _bundle_cache[key] = encoder
    return encoder
