"""UNet-lite noise predictor with cross-attention conditioning.

One model per modality. The parameter registry is partitioned into two
disjoint groups: "backbone" (stem, residual blocks, time MLP, output conv)
and "cross_attention" (every cross-attention sublayer plus the learned null
context token). Output projections are zero-initialized, so a freshly built
model predicts exactly zero noise and conditioning ramps in smoothly.

The text modality reuses the same network at 1x1 spatial extent; down/up
sampling is skipped when there is no room to pool.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .codecs import ModalitySpec, _batch_matmul, _linear_init, sinusoid_table


def time_embed(t, dim: int) -> Tensor:
    """Interleaved sin/cos features of the timestep at geometric frequencies.

    Accepts a single step or an array of per-sample steps; returns (dim,) or
    (B, dim). t=0 maps to all-zero sines and all-one cosines.
    """
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = ts[:, None] * freqs[None, :]
    out = np.zeros((ts.size, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return Tensor(out[0] if np.ndim(t) == 0 else out)


class DiffuserModel:
    def __init__(self, spec: ModalitySpec, rng: np.random.Generator,
                 channels: int = 32, heads: int = 4, time_dim: int = 32):
        self.spec = spec
        self.channels = channels
        self.heads = heads
        self.time_dim = time_dim
        c = channels
        cin = spec.latent_shape[0]
        d = spec.embed_dim
        if c % heads:
            raise ShapeError(f"channels {c} not divisible by heads {heads}")

        P = {}

        def lin(name, n_in, n_out, zero=False):
            w = np.zeros((n_in, n_out)) if zero else _linear_init(rng, n_in, n_out)
            P[name] = Tensor(w, requires_grad=True)

        def conv(name, cout, cin_, k=3, zero=False):
            scale = 1.0 / np.sqrt(cin_ * k * k)
            w = np.zeros((cout, cin_, k, k)) if zero else rng.normal(0, scale, (cout, cin_, k, k))
            P[name + ".w"] = Tensor(w, requires_grad=True)
            P[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True)

        conv("backbone.stem", c, cin)
        lin("backbone.time.w1", time_dim, c)
        lin("backbone.time.w2", c, c)
        for i in range(4):  # res blocks: level0, level1, mid, up
            conv(f"backbone.res{i}.conv1", c, c)
            conv(f"backbone.res{i}.conv2", c, c, zero=True)
            lin(f"backbone.res{i}.temb", c, c)
        conv("backbone.fuse", c, 2 * c, k=1)
        conv("backbone.out", cin, c, zero=True)

        for i in range(3):  # one cross-attention sublayer per resolution stop
            lin(f"cross_attention.ca{i}.wq", c, c)
            lin(f"cross_attention.ca{i}.wk", d, c)
            lin(f"cross_attention.ca{i}.wv", d, c)
            lin(f"cross_attention.ca{i}.wo", c, c, zero=True)
        P["cross_attention.null"] = Tensor(rng.normal(0, 0.5, (1, d)), requires_grad=True)

        self.params = P
        self.backbone_names = {k for k in P if k.startswith("backbone.")}
        self.cross_attention_names = {k for k in P if k.startswith("cross_attention.")}

    # -- parameter registry ------------------------------------------------

    def group(self, name: str) -> dict:
        names = {"backbone": self.backbone_names,
                 "cross_attention": self.cross_attention_names}[name]
        return {k: self.params[k] for k in sorted(names)}

    # -- forward pieces ----------------------------------------------------

    def _time_features(self, t, batch: int) -> Tensor:
        ts = np.full(batch, int(t)) if np.ndim(t) == 0 else np.asarray(t)
        if ts.shape != (batch,):
            raise ShapeError(f"per-sample t shape {ts.shape} != batch ({batch},)")
        emb = time_embed(ts, self.time_dim)
        p = self.params
        h = T.silu(T.matmul(emb, p["backbone.time.w1"]))
        return T.matmul(h, p["backbone.time.w2"])  # (B, c)

    def _res(self, i: int, x: Tensor, temb: Tensor) -> Tensor:
        p = self.params
        B, c, H, W = x.shape
        h = T.layer_norm(x, axis=1)
        h = T.conv2d(h, p[f"backbone.res{i}.conv1.w"], p[f"backbone.res{i}.conv1.b"])
        shift = T.matmul(temb, p[f"backbone.res{i}.temb"])  # (B, c)
        h = T.add(h, T.broadcast_to(T.reshape(shift, (B, c, 1, 1)), h.shape))
        h = T.silu(h)
        h = T.conv2d(h, p[f"backbone.res{i}.conv2.w"], p[f"backbone.res{i}.conv2.b"])
        return T.add(x, h)

    def _cross_attn(self, i: int, x: Tensor, ctx: Tensor) -> Tensor:
        p = self.params
        B, c, H, W = x.shape
        h_ = self.heads
        dh = c // h_
        seq = T.transpose(T.reshape(x, (B, c, H * W)), (0, 2, 1))  # (B, HW, c)
        qn = T.layer_norm(seq, axis=-1)

        def split(tok, width):
            return T.transpose(T.reshape(tok, (B, tok.shape[1], h_, width)), (0, 2, 1, 3))

        q = split(_batch_matmul(qn, p[f"cross_attention.ca{i}.wq"]), dh)
        k = split(_batch_matmul(ctx, p[f"cross_attention.ca{i}.wk"]), dh)
        v = split(_batch_matmul(ctx, p[f"cross_attention.ca{i}.wv"]), dh)
        scores = T.mul(T.matmul(q, T.swap_last2(k)), 1.0 / np.sqrt(dh))
        mixed = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (B, H * W, c))
        out = _batch_matmul(merged, p[f"cross_attention.ca{i}.wo"])
        res = T.add(seq, out)
        return T.reshape(T.transpose(res, (0, 2, 1)), (B, c, H, W))

    def _context_tokens(self, context, batch: int) -> Tensor:
        d = self.spec.embed_dim
        if context is None:
            null = self.params["cross_attention.null"]
            return T.broadcast_to(T.reshape(null, (1, 1, d)), (batch, 1, d))
        ctx = T.as_tensor(context)
        if ctx.ndim == 2:
            ctx = T.broadcast_to(T.reshape(ctx, (1,) + ctx.shape), (batch,) + ctx.shape)
        if ctx.ndim != 3 or ctx.shape[0] != batch or ctx.shape[2] != d:
            raise ShapeError(f"context must be (B, S, {d}), got {ctx.shape}")
        return ctx

    def predict_eps(self, z_t, t, context=None) -> Tensor:
        """Predicted noise, same shape as z_t. With context=None the
        cross-attention sublayers attend to the learned null token."""
        z_t = T.as_tensor(z_t)
        squeeze = z_t.ndim == 3
        if squeeze:
            z_t = T.reshape(z_t, (1,) + z_t.shape)
        if tuple(z_t.shape[1:]) != tuple(self.spec.latent_shape):
            raise ShapeError(
                f"latent {tuple(z_t.shape[1:])} != {self.spec.name} spec "
                f"{tuple(self.spec.latent_shape)}"
            )
        B = z_t.shape[0]
        p = self.params
        ctx = self._context_tokens(context, B)
        temb = self._time_features(t, B)

        h = T.conv2d(z_t, p["backbone.stem.w"], p["backbone.stem.b"])
        h = self._res(0, h, temb)
        h = self._cross_attn(0, h, ctx)
        skip = h
        pooled = h.shape[2] > 1
        if pooled:
            h = T.avg_pool2d(h, 2)
        h = self._res(1, h, temb)
        h = self._cross_attn(1, h, ctx)
        h = self._res(2, h, temb)
        if pooled:
            h = T.upsample2d(h, 2)
        h = T.concat([h, skip], axis=1)
        h = T.conv2d(h, p["backbone.fuse.w"], p["backbone.fuse.b"], padding=0)
        h = self._res(3, h, temb)
        h = self._cross_attn(2, h, ctx)
        h = T.silu(T.layer_norm(h, axis=1))
        out = T.conv2d(h, p["backbone.out.w"], p["backbone.out.b"])
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def encoder_features(self, z_t, t, context=None) -> Tensor:
        """Space-pooled features from the down path (for the view-invariance
        term during flow training); (B, channels)."""
        z_t = T.as_tensor(z_t)
        if z_t.ndim == 3:
            z_t = T.reshape(z_t, (1,) + z_t.shape)
        B = z_t.shape[0]
        p = self.params
        ctx = self._context_tokens(context, B)
        temb = self._time_features(t, B)
        h = T.conv2d(z_t, p["backbone.stem.w"], p["backbone.stem.b"])
        h = self._res(0, h, temb)
        h = self._cross_attn(0, h, ctx)
        if h.shape[2] > 1:
            h = T.avg_pool2d(h, 2)
        h = self._res(1, h, temb)
        h = self._cross_attn(1, h, ctx)
        return T.tmean(T.reshape(h, (B, self.channels, h.shape[2] * h.shape[3])), axis=2)


def predict_eps(model: DiffuserModel, z_t, t, context=None) -> Tensor:
    return model.predict_eps(z_t, t, context)
