"""Model weights: archive format, loading, and deterministic stand-in synthesis.

Weights are consumed as .npz tensor archives with a JSON manifest mapping
archive keys to shapes and layer names; the directory is located through the
MODEL_DIR environment variable or an explicit path.  When no archive is
supplied, a deterministic stand-in set is synthesized: the encoder gets
random sign-paired orthonormal kernels and the inversion decoder is fitted
in closed form (ridge regression) against a procedural image corpus, so the
whole studio runs out of the box with reproducible numbers.  Drop genuine
pretrained archives into MODEL_DIR to swap in real models.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import synthetic
from .errors import WeightsNotLoadedError

# (kind, name, c_in, c_out); pool entries halve the spatial dims
ENCODER_ARCHS = {
    "vgg16": (
        ("conv", "conv1_1", 3, 64),
        ("conv", "conv1_2", 64, 64),
        ("pool", "pool1", 0, 0),
        ("conv", "conv2_1", 64, 128),
        ("conv", "conv2_2", 128, 128),
        ("pool", "pool2", 0, 0),
        ("conv", "conv3_1", 128, 256),
        ("conv", "conv3_2", 256, 256),
        ("conv", "conv3_3", 256, 256),
        ("pool", "pool3", 0, 0),
        ("conv", "conv4_1", 256, 512),
        ("conv", "conv4_2", 512, 512),
        ("conv", "conv4_3", 512, 512),
        ("pool", "pool4", 0, 0),
        ("conv", "conv5_1", 512, 512),
    ),
    "vgg19": (
        ("conv", "conv1_1", 3, 64),
        ("conv", "conv1_2", 64, 64),
        ("pool", "pool1", 0, 0),
        ("conv", "conv2_1", 64, 128),
        ("conv", "conv2_2", 128, 128),
        ("pool", "pool2", 0, 0),
        ("conv", "conv3_1", 128, 256),
        ("conv", "conv3_2", 256, 256),
        ("conv", "conv3_3", 256, 256),
        ("conv", "conv3_4", 256, 256),
        ("pool", "pool3", 0, 0),
        ("conv", "conv4_1", 256, 512),
        ("conv", "conv4_2", 512, 512),
        ("conv", "conv4_3", 512, 512),
        ("conv", "conv4_4", 512, 512),
        ("pool", "pool4", 0, 0),
        ("conv", "conv5_1", 512, 512),
    ),
}

TAP_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1", "conv4_1")
DEFAULT_SWAP_LAYER = "conv4_1"
DEFAULT_EMBED_DIM = 64

_FIT_SEED_OFFSET = 7919
_FIT_CORPUS_N = 16
_FIT_CORPUS_SIZE = 96
_RIDGE = 1e-4


def _paired_orthonormal_kernel(rng, c_in, c_out, dtype):
    """Random conv kernel whose filters come in (w, -w) pairs.

    Kernels are stored (k,k,C_in,C_out).  The half-stack is orthonormalized
    along its smaller dimension and scaled by sqrt(2) so activation variance
    survives the ReLU that follows; the pairing keeps the pre-activation
    recoverable from the ReLU pair, which is what makes a fitted linear
    decoder work.
    """
    half = c_out // 2
    d = c_in * 9
    m = rng.standard_normal((d, half))
    if half >= d:
        q, _ = np.linalg.qr(m.T)  # (half, d), orthonormal columns
        m = q.T  # orthonormal rows: patch exactly recoverable
    else:
        q, _ = np.linalg.qr(m)
        m = q  # orthonormal columns: isometric projection
    w = np.concatenate([m, -m], axis=1) * np.sqrt(2.0)
    return w.reshape(3, 3, c_in, c_out).astype(dtype)


def synthesize_encoder_weights(seed=0, arch="vgg16", dtype=np.float32):
    """Deterministic stand-in encoder weights: {layer: (w, b)}."""
    if arch not in ENCODER_ARCHS:
        raise WeightsNotLoadedError(f"unknown encoder arch {arch!r}")
    rng = np.random.default_rng(seed)
    weights = {}
    for kind, name, c_in, c_out in ENCODER_ARCHS[arch]:
        if kind != "conv":
            continue
        w = _paired_orthonormal_kernel(rng, c_in, c_out, dtype)
        b = np.zeros(c_out, dtype=dtype)
        weights[name] = (w, b)
    return weights


def synthesize_embedder_weights(seed=0, dim=DEFAULT_EMBED_DIM, dtype=np.float32):
    """Projection matrix for the stub embedder: dim x (16*16*3 + 1 bias)."""
    rng = np.random.default_rng(seed + 31337)
    proj = rng.standard_normal((dim, 16 * 16 * 3 + 1)) / np.sqrt(16 * 16 * 3 + 1)
    return proj.astype(dtype)


def _conv_field(x, w, b):
    """Plain (non-graph) same-padded 3x3 convolution on an (H,W,C) field."""
    from .autodiff import conv_forward

    return conv_forward(x, w, b, stride=1, pad=1)


def _pool_field(x):
    h, w, c = x.shape
    ho, wo = h // 2, w // 2
    return x[: ho * 2, : wo * 2].reshape(ho, 2, wo, 2, c).mean(axis=(1, 3))


def _unpool_field(x):
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def _encoder_trace(img_norm, enc_weights, arch, stop_after):
    """Activations after each arch entry, keyed by entry name.

    conv entries record the post-ReLU output; an extra '<name>:pre' key holds
    the pre-activation.  pool entries record the pooled field.
    """
    trace = {"input": img_norm}
    x = img_norm
    for kind, name, _, _ in ENCODER_ARCHS[arch]:
        if kind == "conv":
            w, b = enc_weights[name]
            pre = _conv_field(x, w, b)
            trace[name + ":pre"] = pre
            x = np.maximum(pre, 0.0)
            trace[name] = x
        else:
            x = _pool_field(x)
            trace[name] = x
        if name == stop_after:
            break
    return trace


class _RidgeAccumulator:
    """Streaming normal equations for target = D @ [3x3 input window; 1]."""

    def __init__(self, c_in, c_out):
        self.c_in = c_in
        self.f = c_in * 9 + 1
        self.gram = np.zeros((self.f, self.f), dtype=np.float32)
        self.cross = np.zeros((c_out, self.f), dtype=np.float32)

    def add(self, u, v):
        from .autodiff import _im2col

        c_out = v.shape[-1]
        h = min(u.shape[0], v.shape[0])
        w = min(u.shape[1], v.shape[1])
        col, _, _ = _im2col(np.ascontiguousarray(u[:h, :w], dtype=np.float32), 3, 1, 1)
        feat = np.concatenate([col, np.ones((col.shape[0], 1), dtype=np.float32)], axis=1)
        tgt = v[:h, :w].reshape(-1, c_out).astype(np.float32)
        self.gram += feat.T @ feat
        self.cross += tgt.T @ feat

    def solve(self, ridge=_RIDGE):
        gram = self.gram.astype(np.float64)
        lam = ridge * np.trace(gram) / self.f
        sol = np.linalg.solve(gram + lam * np.eye(self.f), self.cross.T.astype(np.float64))
        w = sol[:-1].reshape(3, 3, self.c_in, -1)
        b = sol[-1]
        return w, b


def decoder_plan(arch="vgg16", swap_layer=DEFAULT_SWAP_LAYER):
    """Decoder stage list mirroring the encoder back from the swap layer.

    Each conv stage names the encoder entry whose *input* it reconstructs;
    unpool stages mirror the encoder's pools.
    """
    entries = ENCODER_ARCHS[arch]
    idx = next(i for i, e in enumerate(entries) if e[1] == swap_layer)
    plan = []
    for kind, name, c_in, c_out in reversed(entries[: idx + 1]):
        if kind == "conv":
            plan.append(("conv", name, c_out, c_in))
        else:
            plan.append(("unpool", name, 0, 0))
    return tuple(plan)


def fit_decoder_weights(enc_weights, seed=0, arch="vgg16", swap_layer=DEFAULT_SWAP_LAYER,
                        dtype=np.float32, corpus_n=_FIT_CORPUS_N, corpus_size=_FIT_CORPUS_SIZE):
    """Closed-form reconstruction fit of the inversion decoder.

    Every decoder conv is a ridge regression from a 3x3 window of its
    decode-time input (teacher-forced from real encoder activations) to the
    activation it must reconstruct.  Deterministic for a fixed seed.
    """
    from .features import IMAGE_MEAN, IMAGE_STD

    entries = ENCODER_ARCHS[arch]
    names = [e[1] for e in entries]
    plan = decoder_plan(arch, swap_layer)
    accs = {}
    for kind, name, d_in, d_out in plan:
        if kind == "conv":
            accs["dec_" + name] = _RidgeAccumulator(d_in, d_out)

    corpus = synthetic.decoder_fit_corpus(seed + _FIT_SEED_OFFSET, corpus_n, corpus_size)
    for img in corpus:
        norm = (img.astype(np.float32) - IMAGE_MEAN) / IMAGE_STD
        trace = _encoder_trace(norm, enc_weights, arch, stop_after=swap_layer)
        for kind, name, _, _ in plan:
            if kind != "conv":
                continue
            pos = names.index(name)
            prev = names[pos - 1] if pos > 0 else "input"
            if name == swap_layer:
                # decode-time input is the raw (pre-ReLU) tap
                u = trace[name + ":pre"]
            elif pos + 1 < len(entries) and entries[pos + 1][0] == "pool":
                # decode-time input went through pool then unpool
                u = _unpool_field(_pool_field(trace[name]))
            else:
                u = trace[name]
            accs["dec_" + name].add(u, trace[prev])
        del trace

    dec_weights = {}
    for key, acc in accs.items():
        w_fit, b_fit = acc.solve()
        dec_weights[key] = (w_fit.astype(dtype), b_fit.astype(dtype))
    return dec_weights


# -- archive round trip --------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def export_model_dir(path, seed=0, arch="vgg16", embed_dim=DEFAULT_EMBED_DIM,
                     swap_layer=DEFAULT_SWAP_LAYER):
    """Write synthesized stand-in archives plus manifest into ``path``."""
    os.makedirs(path, exist_ok=True)
    enc = synthesize_encoder_weights(seed, arch)
    dec = fit_decoder_weights(enc, seed=seed, arch=arch, swap_layer=swap_layer)
    emb = synthesize_embedder_weights(seed, embed_dim)

    enc_arrays = {}
    for name, (w, b) in enc.items():
        enc_arrays[name + ".weight"] = w
        enc_arrays[name + ".bias"] = b
    dec_arrays = {}
    for name, (w, b) in dec.items():
        dec_arrays[name + ".weight"] = w
        dec_arrays[name + ".bias"] = b
    emb_arrays = {"projection": emb}

    np.savez(os.path.join(path, "encoder.npz"), **enc_arrays)
    np.savez(os.path.join(path, "decoder.npz"), **dec_arrays)
    np.savez(os.path.join(path, "embedder.npz"), **emb_arrays)

    def keymap(arrays, layer_of):
        return {
            k: {"shape": list(v.shape), "layer": layer_of(k)} for k, v in arrays.items()
        }

    manifest = {
        "encoder": {
            "file": "encoder.npz",
            "arch": arch,
            "tap_layers": list(TAP_LAYERS),
            "keys": keymap(enc_arrays, lambda k: k.split(".")[0]),
        },
        "decoder": {
            "file": "decoder.npz",
            "swap_layer": swap_layer,
            "keys": keymap(dec_arrays, lambda k: k.split(".")[0]),
        },
        "embedder": {
            "file": "embedder.npz",
            "dim": embed_dim,
            "keys": keymap(emb_arrays, lambda k: "projection"),
        },
        "seed": seed,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_model_dir(path):
    """Load encoder/decoder/embedder weight dicts from an archive directory."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise WeightsNotLoadedError(f"no {MANIFEST_NAME} in {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    def load_section(section):
        info = manifest[section]
        archive = np.load(os.path.join(path, info["file"]))
        out = {}
        for key, meta in info["keys"].items():
            if key not in archive:
                raise WeightsNotLoadedError(f"{section} archive missing key {key!r}")
            arr = archive[key]
            if list(arr.shape) != list(meta["shape"]):
                raise WeightsNotLoadedError(
                    f"{section} key {key!r}: shape {list(arr.shape)} != manifest {meta['shape']}"
                )
            out[key] = arr
        return info, out

    enc_info, enc_arrays = load_section("encoder")
    dec_info, dec_arrays = load_section("decoder")
    emb_info, emb_arrays = load_section("embedder")

    def pairs(arrays):
        grouped = {}
        for key, arr in arrays.items():
            name, part = key.rsplit(".", 1)
            grouped.setdefault(name, {})[part] = arr
        return {n: (g["weight"], g["bias"]) for n, g in grouped.items()}

    return {
        "arch": enc_info["arch"],
        "tap_layers": tuple(enc_info["tap_layers"]),
        "encoder": pairs(enc_arrays),
        "decoder": pairs(dec_arrays),
        "swap_layer": dec_info["swap_layer"],
        "embed_dim": emb_info["dim"],
        "embedder": emb_arrays["projection"],
    }
