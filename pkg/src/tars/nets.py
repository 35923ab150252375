"""Learnable components: image encoder, hypernetworks, the deformation
network, the canonical shape generator, positional encodings and latent
codes.

The two field MLPs never own parameters directly: their per-layer weights
are emitted by hypernetworks conditioned on a latent code, so a single
image (or the canonical code) fully determines a network. The encoder,
the unconditioned point-feature MLP and the ray-marcher LSTM are ordinary
trainable parameter stores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import substream


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

def positional_encode(x: ad.Tensor, num_freqs: int) -> ad.Tensor:
    """[sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{F-1} pi x), cos(...)].

    Frequency-major layout; output width is 2 * num_freqs * d.
    """
    x = ad.as_tensor(x)
    if num_freqs == 0:
        return ad.Tensor(np.zeros(x.shape[:-1] + (0,)))
    parts = []
    for f in range(num_freqs):
        scaled = ad.scale(x, math.pi * (2.0 ** f))
        parts.append(ad.sin(scaled))
        parts.append(ad.cos(scaled))
    return ad.concat(parts)


# ---------------------------------------------------------------------------
# MLP skeletons and hypernetworks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MLPSpec:
    """Shape of a generated field MLP: trunk of hidden layers (each
    linear + layer-norm + relu) followed by named linear heads."""
    in_dim: int
    hidden_dims: tuple[int, ...]
    heads: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.hidden_dims:
            raise ValueError("MLPSpec: hidden_dims must be non-empty")
        if self.in_dim < 1 or any(d < 1 for d in self.hidden_dims):
            raise ValueError("MLPSpec: all dims must be >= 1")

    def layers(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every linear layer, trunk first."""
        out = []
        prev = self.in_dim
        for i, h in enumerate(self.hidden_dims):
            out.append((f"trunk{i}", prev, h))
            prev = h
        for name, dim in self.heads.items():
            out.append((f"head_{name}", prev, dim))
        return out

    def param_count(self) -> int:
        return sum(fi * fo + fo for _, fi, fo in self.layers())


@dataclass
class GeneratedWeights:
    """Per-layer weight matrices and bias vectors produced by a hypernetwork."""
    trunk: list[tuple[ad.Tensor, ad.Tensor]]
    heads: dict[str, tuple[ad.Tensor, ad.Tensor]]

    def param_count(self) -> int:
        n = 0
        for w, b in list(self.trunk) + list(self.heads.values()):
            n += w.size + b.size
        return n


def _kaiming_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class HyperNetwork:
    """One small MLP per target layer, mapping a latent code to that
    layer's flattened weights and bias.

    Each sub-MLP is latent -> hidden (relu) -> fan_in*fan_out + fan_out.
    The final layer is down-scaled by 1/fan_in of the target layer so the
    latent only perturbs the generated weights; the target layer's starting
    point lives in the final bias (Kaiming for trunk layers, zero for heads,
    which makes freshly generated heads output exactly zero).
    """

    def __init__(self, store: ad.ParamStore, prefix: str, spec: MLPSpec,
                 latent_dim: int, hidden: int, rng):
        self.prefix = prefix
        self.spec = spec
        self.latent_dim = latent_dim
        self.hidden = hidden
        for lname, fi, fo in spec.layers():
            out_dim = fi * fo + fo
            base = f"{prefix}/{lname}"
            store.add(f"{base}/w1", _kaiming_uniform(rng, latent_dim,
                                                     (latent_dim, hidden)))
            store.add(f"{base}/b1", np.zeros(hidden))
            w2_bound = 1.0 / (math.sqrt(hidden) * fi)
            store.add(f"{base}/w2", rng.uniform(-w2_bound, w2_bound,
                                                (hidden, out_dim)))
            b2 = np.zeros(out_dim)
            if lname.startswith("trunk"):
                b2[:fi * fo] = _kaiming_uniform(rng, fi, fi * fo)
            store.add(f"{base}/b2", b2)

    def generate(self, p: dict[str, ad.Tensor], latent: ad.Tensor
                 ) -> GeneratedWeights:
        if latent.shape[-1] != self.latent_dim:
            raise ValueError(
                f"hypernet {self.prefix}: latent dim {latent.shape[-1]} "
                f"!= {self.latent_dim}")
        trunk = []
        heads = {}
        for lname, fi, fo in self.spec.layers():
            base = f"{self.prefix}/{lname}"
            h = ad.relu(ad.add(ad.matmul(latent, p[f"{base}/w1"]),
                               p[f"{base}/b1"]))
            out = ad.add(ad.matmul(h, p[f"{base}/w2"]), p[f"{base}/b2"])
            w = ad.reshape(ad.slice_last(out, 0, fi * fo), (fi, fo))
            b = ad.reshape(ad.slice_last(out, fi * fo, fi * fo + fo), (fo,))
            if lname.startswith("trunk"):
                trunk.append((w, b))
            else:
                heads[lname[len("head_"):]] = (w, b)
        gw = GeneratedWeights(trunk=trunk, heads=heads)
        assert gw.param_count() == self.spec.param_count()
        return gw


_LN_CONSTS: dict[int, tuple[ad.Tensor, ad.Tensor]] = {}


def _ln_consts(width: int) -> tuple[ad.Tensor, ad.Tensor]:
    if width not in _LN_CONSTS:
        _LN_CONSTS[width] = (ad.Tensor(np.ones(width)), ad.Tensor(np.zeros(width)))
    return _LN_CONSTS[width]


def generated_trunk(weights: GeneratedWeights, x: ad.Tensor) -> ad.Tensor:
    """Run the trunk: linear -> layer-norm (unit affine) -> relu per layer."""
    h = x
    for w, b in weights.trunk:
        h = ad.add(ad.matmul(h, w), b)
        gain, bias = _ln_consts(h.shape[-1])
        h = ad.relu(ad.layer_norm(h, gain, bias))
    return h


def generated_head(weights: GeneratedWeights, name: str, h: ad.Tensor) -> ad.Tensor:
    w, b = weights.heads[name]
    return ad.add(ad.matmul(h, w), b)


# ---------------------------------------------------------------------------
# field networks
# ---------------------------------------------------------------------------

@dataclass
class DeformOutput:
    """Deformation head outputs at a batch of object-space points."""
    delta: ad.Tensor              # (B, 3) world-units displacement
    features: ad.Tensor | None    # (B, k) or None when k == 0
    rgb: ad.Tensor                # (B, 3) in [0, 1]
    trunk: ad.Tensor              # (B, hidden) last trunk layer


@dataclass
class CanonicalPoints:
    xyz: ad.Tensor                # (B, 3) canonical coordinates
    feat: ad.Tensor | None        # (B, k)


@dataclass
class ShapeOutput:
    sdf: ad.Tensor                # (B, 1)
    rgb: ad.Tensor                # (B, 3)
    trunk: ad.Tensor              # (B, hidden)


def compose_canonical(x: ad.Tensor, out: DeformOutput) -> CanonicalPoints:
    """Canonical point = object point + predicted displacement, plus the
    learned point features carried alongside."""
    return CanonicalPoints(xyz=ad.add(x, out.delta), feat=out.features)


@dataclass
class ModelConfig:
    latent_dim: int = 128
    k: int = 4
    hidden_dim: int = 128
    trunk_layers: int = 4
    freq_point: int = 6
    freq_feat: int = 2
    lstm_dim: int = 32
    hyper_hidden: int = 64
    uncond_hidden: int = 32
    enc_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    image_size: int = 64

    def point_enc_dim(self) -> int:
        return 3 + 2 * self.freq_point * 3

    def feat_enc_dim(self) -> int:
        return 2 * self.freq_feat * self.k

    def deform_spec(self) -> MLPSpec:
        heads = {"delta": 3, "rgb": 3}
        if self.k > 0:
            heads["feat"] = self.k
        return MLPSpec(self.point_enc_dim(),
                       (self.hidden_dim,) * self.trunk_layers, heads)

    def shape_spec(self) -> MLPSpec:
        return MLPSpec(self.point_enc_dim() + self.feat_enc_dim(),
                       (self.hidden_dim,) * self.trunk_layers,
                       {"sdf": 1, "rgb": 3})


# ---------------------------------------------------------------------------
# convolution primitive (encoder only)
# ---------------------------------------------------------------------------

def conv2d(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor,
           stride: int = 2, pad: int = 1, ksize: int = 3) -> ad.Tensor:
    """Strided 2D convolution on an (H, W, Cin) image.

    Weight layout is (ksize*ksize*Cin, Cout) with (ky, kx, cin) flattened
    row-major; implemented as an im2col matmul with a hand-rolled backward.
    """
    H, W, cin = x.shape
    cout = w.shape[1]
    padded = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(padded, (ksize, ksize),
                                                    axis=(0, 1))
    view = view[::stride, ::stride]            # (Ho, Wo, Cin, ky, kx)
    ho, wo = view.shape[0], view.shape[1]
    cols = view.transpose(0, 1, 3, 4, 2).reshape(ho * wo, ksize * ksize * cin)
    out = (cols @ w.data + b.data).reshape(ho, wo, cout)

    def bwd(g):
        g2 = g.reshape(ho * wo, cout)
        dw = cols.T @ g2
        db = g2.sum(axis=0)
        dcols = (g2 @ w.data.T).reshape(ho, wo, ksize, ksize, cin)
        dpad = np.zeros_like(padded)
        for ky in range(ksize):
            for kx in range(ksize):
                dpad[ky:ky + stride * ho:stride,
                     kx:kx + stride * wo:stride, :] += dcols[:, :, ky, kx, :]
        dx = dpad[pad:pad + H, pad:pad + W, :]
        return [dx, dw, db]

    return ad.custom_op(out, [x, w, b], bwd, name="conv2d")


class ImageEncoder:
    """Strided conv stack + global average pool + linear, trained from
    scratch on the masked synthetic images."""

    def __init__(self, store: ad.ParamStore, cfg: ModelConfig, rng):
        self.cfg = cfg
        cin = 3
        size = cfg.image_size
        for i, cout in enumerate(cfg.enc_channels):
            fan_in = 9 * cin
            store.add(f"enc/conv{i}/w", _kaiming_uniform(rng, fan_in,
                                                         (fan_in, cout)))
            store.add(f"enc/conv{i}/b", np.zeros(cout))
            cin = cout
            size = (size + 2 - 3) // 2 + 1
        self.final_hw = size
        store.add("enc/fc/w", _kaiming_uniform(rng, cin,
                                               (cin, cfg.latent_dim)))
        store.add("enc/fc/b", np.zeros(cfg.latent_dim))

    def forward(self, p: dict[str, ad.Tensor], image: np.ndarray) -> ad.Tensor:
        cfg = self.cfg
        if image.shape != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(
                f"encoder expects {(cfg.image_size, cfg.image_size, 3)} "
                f"images, got {image.shape}")
        h = ad.Tensor(image)
        for i in range(len(cfg.enc_channels)):
            h = ad.relu(conv2d(h, p[f"enc/conv{i}/w"], p[f"enc/conv{i}/b"]))
        n = h.shape[0] * h.shape[1]
        flat = ad.reshape(h, (n, h.shape[2]))
        pooled = ad.matmul(ad.Tensor(np.full((1, n), 1.0 / n)), flat)
        return ad.add(ad.matmul(pooled, p["enc/fc/w"]), p["enc/fc/b"])


# ---------------------------------------------------------------------------
# the full bundle
# ---------------------------------------------------------------------------

STORE_NAMES = ("encoder", "shape_hyper", "deform_hyper", "uncond",
               "renderer", "canonical")


class FieldNetworks:
    """All parameter stores plus forward helpers for the pipeline.

    Construction is deterministic given (config, seed); the fixed latent
    used by the sphere-pretraining phase is regenerated from the seed
    rather than checkpointed.
    """

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.stores: dict[str, ad.ParamStore] = {n: ad.ParamStore()
                                                 for n in STORE_NAMES}
        self.encoder = ImageEncoder(self.stores["encoder"], cfg,
                                    substream(seed, "init/encoder"))
        self.shape_hyper = HyperNetwork(
            self.stores["shape_hyper"], "shape", cfg.shape_spec(),
            cfg.latent_dim, cfg.hyper_hidden, substream(seed, "init/shape_hyper"))
        self.deform_hyper = HyperNetwork(
            self.stores["deform_hyper"], "deform", cfg.deform_spec(),
            cfg.latent_dim, cfg.hyper_hidden, substream(seed, "init/deform_hyper"))
        self._init_uncond(substream(seed, "init/uncond"))
        self._init_renderer(substream(seed, "init/renderer"))
        self.stores["canonical"].add("canonical_latent",
                                     np.zeros((1, cfg.latent_dim)))
        self.pretrain_latent = substream(seed, "latent0a").normal(
            size=(1, cfg.latent_dim))

    def _init_uncond(self, rng):
        cfg = self.cfg
        if cfg.k == 0:
            return
        s = self.stores["uncond"]
        s.add("uncond/w0", _kaiming_uniform(rng, 3, (3, cfg.uncond_hidden)))
        s.add("uncond/b0", np.zeros(cfg.uncond_hidden))
        s.add("uncond/ln_gain", np.ones(cfg.uncond_hidden))
        s.add("uncond/ln_bias", np.zeros(cfg.uncond_hidden))
        s.add("uncond/w1", _kaiming_uniform(rng, cfg.uncond_hidden,
                                            (cfg.uncond_hidden, cfg.k)))
        s.add("uncond/b1", np.zeros(cfg.k))

    def _init_renderer(self, rng):
        cfg = self.cfg
        s = self.stores["renderer"]
        in_dim = cfg.hidden_dim + 2 * cfg.freq_point * 3
        hd = cfg.lstm_dim
        bx = 1.0 / math.sqrt(in_dim)
        bh = 1.0 / math.sqrt(hd)
        s.add("lstm/wx", rng.uniform(-bx, bx, (in_dim, 4 * hd)))
        s.add("lstm/wh", rng.uniform(-bh, bh, (hd, 4 * hd)))
        b = np.zeros(4 * hd)
        b[hd:2 * hd] = 1.0  # forget-gate bias
        s.add("lstm/b", b)
        s.add("step/w", rng.uniform(-bh, bh, (hd, 1)))
        # start the march short of the object so early depths are sane
        s.add("step/b", np.full(1, -2.5))

    # -- watching ----------------------------------------------------------

    def watch(self, tape: ad.Tape, trainable: set[str]) -> dict[str, ad.Tensor]:
        """One flat name->Tensor map; only `trainable` stores become leaves,
        the rest are constants frozen for this tape."""
        p: dict[str, ad.Tensor] = {}
        for sname, store in self.stores.items():
            if sname in trainable:
                p.update(store.watch_all(tape))
            else:
                for pname, e in store.entries.items():
                    p[pname] = ad.Tensor(e.value)
        return p

    def constants(self) -> dict[str, ad.Tensor]:
        """All parameters as constants (inference, no tape)."""
        p = {}
        for store in self.stores.values():
            for pname, e in store.entries.items():
                p[pname] = ad.Tensor(e.value)
        return p

    def accumulate(self, p: dict[str, ad.Tensor], grads, trainable: set[str]):
        for sname in trainable:
            store = self.stores[sname]
            for pname in store.entries:
                g = grads.get(p[pname].node)
                if g is not None:
                    store.entries[pname].grad += g

    # -- forward helpers ----------------------------------------------------

    def encode(self, p, image: np.ndarray) -> ad.Tensor:
        return self.encoder.forward(p, image)

    def uncond_features(self, p, x: ad.Tensor) -> ad.Tensor | None:
        """Stage-0a/1 point features from the image-independent 2-layer MLP."""
        if self.cfg.k == 0:
            return None
        h = ad.add(ad.matmul(x, p["uncond/w0"]), p["uncond/b0"])
        h = ad.relu(ad.layer_norm(h, p["uncond/ln_gain"], p["uncond/ln_bias"]))
        return ad.add(ad.matmul(h, p["uncond/w1"]), p["uncond/b1"])

    def shape_weights(self, p, latent: ad.Tensor) -> GeneratedWeights:
        return self.shape_hyper.generate(p, latent)

    def deform_weights(self, p, latent: ad.Tensor) -> GeneratedWeights:
        return self.deform_hyper.generate(p, latent)

    def shape_forward(self, weights: GeneratedWeights, xyz: ad.Tensor,
                      feat: ad.Tensor | None) -> ShapeOutput:
        """SDF/color of (higher-dimensional) canonical points."""
        cfg = self.cfg
        parts = [xyz, positional_encode(xyz, cfg.freq_point)]
        if cfg.k > 0:
            if feat is None:
                raise ValueError("shape_forward: k > 0 requires point features")
            parts.append(positional_encode(feat, cfg.freq_feat))
        h = generated_trunk(weights, ad.concat(parts))
        sdf = generated_head(weights, "sdf", h)
        rgb = ad.sigmoid(generated_head(weights, "rgb", h))
        return ShapeOutput(sdf=sdf, rgb=rgb, trunk=h)

    def deform_forward(self, weights: GeneratedWeights, x: ad.Tensor
                       ) -> DeformOutput:
        """Displacement, point features and color at object-space points."""
        cfg = self.cfg
        xin = ad.concat([x, positional_encode(x, cfg.freq_point)])
        h = generated_trunk(weights, xin)
        delta = generated_head(weights, "delta", h)
        rgb = ad.sigmoid(generated_head(weights, "rgb", h))
        feat = generated_head(weights, "feat", h) if cfg.k > 0 else None
        return DeformOutput(delta=delta, features=feat, rgb=rgb, trunk=h)
