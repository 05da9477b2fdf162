"""Dense-connected convolutional autoencoder with explicit gradients.

The encoder stacks dense blocks (each conv layer sees the channel
concatenation of the block input and all previous layer outputs), each
followed by a stride-2 downsampling conv, then a fully connected map to the
latent code. The decoder mirrors it with nearest-neighbor upsampling +
convolution and a 1-channel sigmoid output. Forward, loss, and backward
passes are written out by hand in float64 numpy so gradients can be
verified against finite differences to tight tolerance.

Activations are kept channels-last, (B, H, W, C), and convolutions run as
k*k shifted GEMMs; that keeps every copy contiguous along C, which matters
more than GEMM shape on bandwidth-starved machines.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .util import canonical_json

log = logging.getLogger(__name__)

MODEL_MAGIC = b"AMYM"
MODEL_VERSION = 1

_KERNEL = 3
_PAD = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Shape of the autoencoder; defaults target full-scale (K=150) inputs."""

    input_side: int
    latent_dim: int = 10
    growth: int = 8
    block_layers: int = 3
    num_blocks: int = 3
    down_channels: tuple[int, ...] = (16, 16, 16)
    decoder_channels: tuple[int, ...] = (16, 8, 8)

    def __post_init__(self):
        object.__setattr__(self, "down_channels", tuple(self.down_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        if self.input_side < 2 ** self.num_blocks:
            raise ValueError(f"input side {self.input_side} too small for {self.num_blocks} downsamplings")
        if self.latent_dim < 1 or self.growth < 1 or self.block_layers < 1:
            raise ValueError("latent_dim, growth and block_layers must be >= 1")
        if len(self.down_channels) != self.num_blocks:
            raise ValueError("need one down_channels entry per block")
        if len(self.decoder_channels) != self.num_blocks:
            raise ValueError("need one decoder_channels entry per up level")

    def spatial_sizes(self) -> list[int]:
        """Feature-map side lengths after each downsampling stage."""
        sizes = [self.input_side]
        for _ in range(self.num_blocks):
            sizes.append((sizes[-1] + 1) // 2)
        return sizes

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """All weight/bias shapes in declaration order (conv W: k,k,Cin,Cout)."""
        shapes: list[tuple[str, tuple[int, ...]]] = []
        ch = 1
        for b in range(self.num_blocks):
            cin = ch
            for l in range(self.block_layers):
                shapes.append((f"enc_b{b}_conv{l}_W", (_KERNEL, _KERNEL, cin, self.growth)))
                shapes.append((f"enc_b{b}_conv{l}_b", (self.growth,)))
                cin += self.growth
            shapes.append((f"enc_b{b}_down_W", (_KERNEL, _KERNEL, cin, self.down_channels[b])))
            shapes.append((f"enc_b{b}_down_b", (self.down_channels[b],)))
            ch = self.down_channels[b]
        s_last = self.spatial_sizes()[-1]
        flat = ch * s_last * s_last
        shapes.append(("enc_fc_W", (self.latent_dim, flat)))
        shapes.append(("enc_fc_b", (self.latent_dim,)))
        shapes.append(("dec_fc_W", (flat, self.latent_dim)))
        shapes.append(("dec_fc_b", (flat,)))
        cin = ch
        for i in range(self.num_blocks):
            shapes.append((f"dec_conv{i}_W", (_KERNEL, _KERNEL, cin, self.decoder_channels[i])))
            shapes.append((f"dec_conv{i}_b", (self.decoder_channels[i],)))
            cin = self.decoder_channels[i]
        shapes.append(("dec_out_W", (_KERNEL, _KERNEL, cin, 1)))
        shapes.append(("dec_out_b", (1,)))
        return shapes

    @property
    def n_encoder_arrays(self) -> int:
        return 2 * (self.num_blocks * (self.block_layers + 1) + 1)

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "latent_dim": self.latent_dim,
            "growth": self.growth,
            "block_layers": self.block_layers,
            "num_blocks": self.num_blocks,
            "down_channels": list(self.down_channels),
            "decoder_channels": list(self.decoder_channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            input_side=int(d["input_side"]),
            latent_dim=int(d["latent_dim"]),
            growth=int(d["growth"]),
            block_layers=int(d["block_layers"]),
            num_blocks=int(d["num_blocks"]),
            down_channels=tuple(d["down_channels"]),
            decoder_channels=tuple(d["decoder_channels"]),
        )


@dataclass
class NetworkParams:
    """Flat list of weight/bias arrays, in declaration order, float64."""

    arrays: list[np.ndarray]

    def copy(self) -> "NetworkParams":
        return NetworkParams([a.copy() for a in self.arrays])

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams([np.zeros_like(a) for a in self.arrays])

    def check(self, config: NetworkConfig) -> None:
        shapes = config.param_shapes()
        if len(self.arrays) != len(shapes):
            raise ValueError(f"expected {len(shapes)} arrays, got {len(self.arrays)}")
        for a, (name, s) in zip(self.arrays, shapes):
            if tuple(a.shape) != s:
                raise ValueError(f"{name}: expected shape {s}, got {tuple(a.shape)}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name}: non-finite parameter values")


def init_params(config: NetworkConfig, seed: int) -> NetworkParams:
    """He initialization for ReLU layers, Xavier for the linear/sigmoid ends."""
    rng = np.random.default_rng(seed)
    arrays = []
    for name, shape in config.param_shapes():
        if name.endswith("_b"):
            # small positive offset keeps ReLU preactivations off the exact
            # kink (zero-padded windows would otherwise land on 0.0, where
            # finite differences of the loss are ill-posed)
            fill = 0.0 if name in ("enc_fc_b", "dec_out_b") else 0.01
            arrays.append(np.full(shape, fill, dtype=np.float64))
            continue
        fan_in = int(np.prod(shape[:3])) if len(shape) == 4 else int(shape[1])
        gain = 1.0 if name in ("enc_fc_W", "dec_out_W") else 2.0
        arrays.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape))
    return NetworkParams(arrays)


@dataclass
class LossBreakdown:
    """total = reconstruction + (lambda/2) * centroid, both batch means."""

    reconstruction: float
    centroid: float
    total: float
    lam: float


# ---------------------------------------------------------------------------
# Layer primitives (forward returns a cache consumed by backward)
# ---------------------------------------------------------------------------

def _conv_forward(x, W, b, stride):
    B, H, Wd, C = x.shape
    k, _, cin, cout = W.shape
    if C != cin:
        raise ValueError(f"conv expects {cin} input channels, got {C}")
    xp = np.pad(x, ((0, 0), (_PAD, _PAD), (_PAD, _PAD), (0, 0)))
    oh = (H + 2 * _PAD - k) // stride + 1
    ow = (Wd + 2 * _PAD - k) // stride + 1
    out = np.empty((B, oh, ow, cout))
    flat = out.reshape(-1, cout)
    flat[:] = b
    for ki in range(k):
        for kj in range(k):
            sl = xp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride, :]
            flat += sl.reshape(-1, cin) @ W[ki, kj]
    return out, (xp, x.shape, W, stride, oh, ow)


def _conv_backward(dout, cache):
    xp, xshape, W, stride, oh, ow = cache
    B, H, Wd, C = xshape
    k, _, cin, cout = W.shape
    dflat = dout.reshape(-1, cout)
    db = dflat.sum(axis=0)
    dW = np.empty_like(W)
    dxp = np.zeros_like(xp)
    for ki in range(k):
        for kj in range(k):
            sel = (
                slice(None),
                slice(ki, ki + stride * oh, stride),
                slice(kj, kj + stride * ow, stride),
                slice(None),
            )
            dW[ki, kj] = xp[sel].reshape(-1, cin).T @ dflat
            dxp[sel] += (dflat @ W[ki, kj].T).reshape(B, oh, ow, cin)
    return dxp[:, _PAD:_PAD + H, _PAD:_PAD + Wd, :], dW, db


def _relu_forward(x):
    mask = x > 0
    return x * mask, mask


def _relu_backward(dout, mask):
    return dout * mask


def _fc_forward(x, W, b):
    return x @ W.T + b, x


def _fc_backward(dout, cache, W):
    x = cache
    return dout @ W, dout.T @ x, dout.sum(axis=0)


def _upsample_forward(x, target):
    th, tw = target
    out = x.repeat(2, axis=1).repeat(2, axis=2)[:, :th, :tw, :]
    return out, x.shape


def _upsample_backward(dout, xshape):
    B, h, w, C = xshape
    full = np.zeros((B, 2 * h, 2 * w, C))
    full[:, : dout.shape[1], : dout.shape[2], :] = dout
    return full.reshape(B, h, 2, w, 2, C).sum(axis=(2, 4))


def _sigmoid_forward(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s, s


def _sigmoid_backward(dout, s):
    return dout * s * (1.0 - s)


# ---------------------------------------------------------------------------
# Full forward / backward
# ---------------------------------------------------------------------------

def _as_batch(x, side):
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 2
    if single:
        a = a[None]
    if a.ndim != 3 or a.shape[1] != side or a.shape[2] != side:
        raise ValueError(f"input must be ({side}, {side}) or (B, {side}, {side}), got {a.shape}")
    return a, single


def _encoder_forward(arrays, config, x4):
    caches = []
    h = x4
    pi = 0
    for b in range(config.num_blocks):
        feats = [h]
        layer_caches = []
        for _ in range(config.block_layers):
            inp = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=3)
            z, c_conv = _conv_forward(inp, arrays[pi], arrays[pi + 1], 1)
            pi += 2
            a, c_relu = _relu_forward(z)
            layer_caches.append((c_conv, c_relu))
            feats.append(a)
        block_out = np.concatenate(feats, axis=3)
        zd, c_down = _conv_forward(block_out, arrays[pi], arrays[pi + 1], 2)
        pi += 2
        h, c_drelu = _relu_forward(zd)
        caches.append((layer_caches, [f.shape[3] for f in feats], c_down, c_drelu))
    B = h.shape[0]
    flat = h.reshape(B, -1)
    z, c_fc = _fc_forward(flat, arrays[pi], arrays[pi + 1])
    caches.append((c_fc, h.shape))
    return z, caches


def _encoder_backward(arrays, config, dz, caches):
    grads = [None] * config.n_encoder_arrays
    pi = config.n_encoder_arrays - 2
    c_fc, hshape = caches[-1]
    dflat, dW, db = _fc_backward(dz, c_fc, arrays[pi])
    grads[pi], grads[pi + 1] = dW, db
    dh = dflat.reshape(hshape)
    for b in range(config.num_blocks - 1, -1, -1):
        layer_caches, widths, c_down, c_drelu = caches[b]
        pi -= 2
        dzd = _relu_backward(dh, c_drelu)
        dblock, dW, db = _conv_backward(dzd, c_down)
        grads[pi], grads[pi + 1] = dW, db
        # split the block-output gradient back onto [input, layer1, ...]
        splits = np.cumsum(widths)[:-1]
        dfeats = list(np.split(dblock, splits, axis=3))
        for l in range(config.block_layers - 1, -1, -1):
            pi -= 2
            c_conv, c_relu = layer_caches[l]
            dzl = _relu_backward(dfeats[l + 1], c_relu)
            dinp, dW, db = _conv_backward(dzl, c_conv)
            grads[pi], grads[pi + 1] = dW, db
            in_splits = np.cumsum(widths[: l + 1])[:-1]
            for i, part in enumerate(np.split(dinp, in_splits, axis=3)):
                dfeats[i] = dfeats[i] + part
        dh = dfeats[0]
    return grads, dh


def _decoder_forward(arrays, config, z):
    sizes = config.spatial_sizes()
    pi = config.n_encoder_arrays
    B = z.shape[0]
    flat, c_fc = _fc_forward(z, arrays[pi], arrays[pi + 1])
    a, c_frelu = _relu_forward(flat)
    s_last = sizes[-1]
    h = a.reshape(B, s_last, s_last, config.down_channels[-1])
    caches = [(c_fc, c_frelu)]
    pi += 2
    for i in range(config.num_blocks):
        target = sizes[config.num_blocks - 1 - i]
        up, c_up = _upsample_forward(h, (target, target))
        zc, c_conv = _conv_forward(up, arrays[pi], arrays[pi + 1], 1)
        pi += 2
        h, c_relu = _relu_forward(zc)
        caches.append((c_up, c_conv, c_relu))
    zo, c_out = _conv_forward(h, arrays[pi], arrays[pi + 1], 1)
    recon, c_sig = _sigmoid_forward(zo)
    caches.append((c_out, c_sig))
    return recon, caches


def _decoder_backward(arrays, config, drecon, caches):
    n_dec = len(arrays) - config.n_encoder_arrays
    grads = [None] * n_dec
    gi = n_dec - 2
    c_out, c_sig = caches[-1]
    dzo = _sigmoid_backward(drecon, c_sig)
    dh, dW, db = _conv_backward(dzo, c_out)
    grads[gi], grads[gi + 1] = dW, db
    for i in range(config.num_blocks - 1, -1, -1):
        gi -= 2
        c_up, c_conv, c_relu = caches[1 + i]
        dzc = _relu_backward(dh, c_relu)
        dup, dW, db = _conv_backward(dzc, c_conv)
        grads[gi], grads[gi + 1] = dW, db
        dh = _upsample_backward(dup, c_up)
    gi -= 2
    c_fc, c_frelu = caches[0]
    B = dh.shape[0]
    dflat = _relu_backward(dh.reshape(B, -1), c_frelu)
    dz, dW, db = _fc_backward(dflat, c_fc, arrays[config.n_encoder_arrays])
    grads[gi], grads[gi + 1] = dW, db
    return grads, dz


def encode(params: NetworkParams, config: NetworkConfig, x) -> np.ndarray:
    """Latent code(s) for one (K, K) input or a (B, K, K) batch."""
    params.check(config)
    x4, single = _as_batch(x, config.input_side)
    z, _ = _encoder_forward(params.arrays, config, x4[..., None])
    return z[0] if single else z


def decode(params: NetworkParams, config: NetworkConfig, z) -> np.ndarray:
    """Reconstruction(s) in (0, 1) for one latent vector or a (B, d) batch."""
    params.check(config)
    zz = np.asarray(z, dtype=np.float64)
    single = zz.ndim == 1
    if single:
        zz = zz[None]
    if zz.shape[1] != config.latent_dim:
        raise ValueError(f"latent must have length {config.latent_dim}, got {zz.shape[1]}")
    recon, _ = _decoder_forward(params.arrays, config, zz)
    out = recon[..., 0]
    return out[0] if single else out


def _loss_forward(arrays, config, x4, centroids, assignments, lam):
    z, enc_caches = _encoder_forward(arrays, config, x4)
    recon, dec_caches = _decoder_forward(arrays, config, z)
    diff_rec = recon - x4
    per_sample_rec = (diff_rec ** 2).mean(axis=(1, 2, 3))
    rec = float(per_sample_rec.mean())
    diff_cent = z - centroids[assignments]
    per_sample_cent = (diff_cent ** 2).sum(axis=1)
    cent = float(per_sample_cent.mean())
    total = rec + 0.5 * lam * cent
    if not np.isfinite(total):
        bad = int(np.flatnonzero(~np.isfinite(per_sample_rec + lam * per_sample_cent))[0])
        raise FloatingPointError(f"non-finite loss at batch sample {bad}")
    breakdown = LossBreakdown(reconstruction=rec, centroid=cent, total=total, lam=lam)
    return breakdown, z, recon, diff_rec, diff_cent, enc_caches, dec_caches


def loss_and_gradients(
    params: NetworkParams,
    config: NetworkConfig,
    batch,
    centroids: np.ndarray,
    assignments: np.ndarray,
    lam: float,
    return_latents: bool = False,
):
    """Loss and exact gradients of the joint objective over one batch.

    total = mean_i MSE(decode(encode(x_i)), x_i)
          + (lam/2) * mean_i ||encode(x_i) - centroids[assignments[i]]||^2

    Returns (LossBreakdown, parameter gradients, gradients w.r.t. latents);
    with ``return_latents`` the encoder outputs are appended.
    """
    params.check(config)
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    x4, _ = _as_batch(batch, config.input_side)
    x4 = x4[..., None]
    centroids = np.asarray(centroids, dtype=np.float64)
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape[0] != x4.shape[0]:
        raise ValueError("one assignment per batch sample required")
    if assignments.size and (assignments.min() < 0 or assignments.max() >= centroids.shape[0]):
        raise IndexError("assignment index out of range")
    if centroids.shape[1] != config.latent_dim:
        raise ValueError(f"centroids must have dimension {config.latent_dim}")

    breakdown, z, recon, diff_rec, diff_cent, enc_caches, dec_caches = _loss_forward(
        params.arrays, config, x4, centroids, assignments, lam
    )
    B = x4.shape[0]
    k2 = config.input_side ** 2
    drecon = 2.0 * diff_rec / (B * k2)
    dec_grads, dz_dec = _decoder_backward(params.arrays, config, drecon, dec_caches)
    dz = dz_dec + lam * diff_cent / B
    enc_grads, _ = _encoder_backward(params.arrays, config, dz, enc_caches)
    grads = NetworkParams(enc_grads + dec_grads)
    if return_latents:
        return breakdown, grads, dz, z
    return breakdown, grads, dz


def loss_only(params, config, batch, centroids, assignments, lam) -> LossBreakdown:
    """Forward-only evaluation of the joint objective."""
    x4, _ = _as_batch(batch, config.input_side)
    breakdown, *_ = _loss_forward(
        params.arrays, config, x4[..., None],
        np.asarray(centroids, dtype=np.float64),
        np.asarray(assignments, dtype=np.int64), lam,
    )
    return breakdown


def gradient_check(
    params: NetworkParams,
    config: NetworkConfig,
    batch,
    centroids,
    assignments,
    lam: float,
    epsilon: float = 1e-5,
    n_checks: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central finite differences.

    Samples ``n_checks`` coordinates across all parameter arrays (or every
    coordinate if there are fewer).
    """
    _, grads, _ = loss_and_gradients(params, config, batch, centroids, assignments, lam)
    sizes = np.array([a.size for a in params.arrays])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_checks else np.sort(rng.choice(total, n_checks, replace=False))
    bounds = np.cumsum(sizes)
    worst = 0.0
    work = params.copy()
    for flat in picks:
        ai = int(np.searchsorted(bounds, flat, side="right"))
        off = int(flat - (bounds[ai - 1] if ai else 0))
        arr = work.arrays[ai].ravel()
        keep = arr[off]
        arr[off] = keep + epsilon
        hi = loss_only(work, config, batch, centroids, assignments, lam).total
        arr[off] = keep - epsilon
        lo = loss_only(work, config, batch, centroids, assignments, lam).total
        arr[off] = keep
        numeric = (hi - lo) / (2 * epsilon)
        analytic = grads.arrays[ai].ravel()[off]
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Model files: magic, version, JSON header, then float64 LE arrays
# ---------------------------------------------------------------------------

def save_model(path, config: NetworkConfig, params: NetworkParams, seed: int,
               metadata: dict | None = None, extras: dict[str, np.ndarray] | None = None) -> None:
    """Write an AMYM model file: net parameters plus named extra arrays."""
    params.check(config)
    extras = extras or {}
    arrays = [(name, a) for (name, _), a in zip(config.param_shapes(), params.arrays)]
    arrays += [(f"extra:{k}", np.asarray(v, dtype=np.float64)) for k, v in extras.items()]
    header = {
        "config": config.to_dict(),
        "seed": int(seed),
        "metadata": metadata or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    hbytes = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> tuple[NetworkConfig, NetworkParams, int, dict, dict[str, np.ndarray]]:
    """Read an AMYM file; returns (config, params, seed, metadata, extras)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = NetworkConfig.from_dict(header["config"])
        arrays = []
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if data.size != count:
                raise ValueError(f"{path}: truncated array {spec['name']}")
            arrays.append((spec["name"], data.reshape(shape).astype(np.float64)))
    n_params = len(config.param_shapes())
    params = NetworkParams([a for _, a in arrays[:n_params]])
    params.check(config)
    extras = {n[len("extra:"):]: a for n, a in arrays[n_params:]}
    return config, params, int(header["seed"]), header["metadata"], extras
