"""Per-modality machinery: specs, latent codecs, prompt and context encoders,
and the trainable guided-adaptation tokens.

All modalities embed into one shared space of width ``embed_dim`` so any pair
can be compared by dot product. Image latents are a lossless space-to-depth
rearrangement of the 16x16 toy renders; the text latent packs quantized token
ids into fixed slots of a d x 1 x 1 vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ModalityError(ValueError):
    """Bad modality spec or sample shape."""


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    latent_shape: tuple  # (channels, H, W); text uses (d, 1, 1)
    context_len: int
    embed_dim: int
    kind: str  # "image" or "text"

    def __post_init__(self):
        if any(int(s) <= 0 for s in self.latent_shape) or len(self.latent_shape) != 3:
            raise ModalityError(f"bad latent shape {self.latent_shape}")
        if self.context_len <= 0 or self.embed_dim <= 0:
            raise ModalityError("context_len and embed_dim must be positive")
        if self.kind not in ("image", "text"):
            raise ModalityError(f"unknown modality kind {self.kind!r}")


def default_modalities(embed_dim: int = 64, context_len: int = 4) -> dict:
    """The four registered pseudo-modalities at toy scale."""
    specs = {
        "text": ModalitySpec("text", (embed_dim, 1, 1), context_len, embed_dim, "text"),
        "xray": ModalitySpec("xray", (4, 8, 8), context_len, embed_dim, "image"),
        "ct": ModalitySpec("ct", (4, 8, 8), context_len, embed_dim, "image"),
        "mri": ModalitySpec("mri", (4, 8, 8), context_len, embed_dim, "image"),
    }
    dims = {s.embed_dim for s in specs.values()}
    if len(dims) != 1:
        raise ModalityError("all modalities must share one embed_dim")
    return specs


# ---------------------------------------------------------------------------
# autoencoders (pluggable; lossless toy implementations)


class ImageLatentCodec:
    """Identity autoencoder: 1x16x16 image <-> 4x8x8 latent via space-to-depth."""

    block = 2

    def encode(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img)
        batched = img.ndim == 4
        x = img if batched else img[None]
        B, C, H, W = x.shape
        k = self.block
        x = x.reshape(B, C, H // k, k, W // k, k)
        x = np.transpose(x, (0, 1, 3, 5, 2, 4)).reshape(B, C * k * k, H // k, W // k)
        return x if batched else x[0]

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        batched = z.ndim == 4
        x = z if batched else z[None]
        B, Ck, h, w = x.shape
        k = self.block
        C = Ck // (k * k)
        x = x.reshape(B, C, k, k, h, w)
        x = np.transpose(x, (0, 1, 4, 2, 5, 3)).reshape(B, C, h * k, w * k)
        return x if batched else x[0]


class TextLatentCodec:
    """Packs padded token ids into the first slots of a d x 1 x 1 latent.

    Slot values sit on a uniform grid in [-1, 1], so round-to-nearest decoding
    is exact for any latent within half a grid cell of a codeword.
    """

    def __init__(self, vocab_size: int, max_tokens: int, dim: int):
        if max_tokens > dim:
            raise ModalityError("latent too small for the token budget")
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.dim = dim

    def encode(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        batched = ids.ndim == 2
        x = ids if batched else ids[None]
        if x.shape[1] != self.max_tokens:
            raise ModalityError(f"expected {self.max_tokens} padded tokens, got {x.shape}")
        z = np.zeros((x.shape[0], self.dim, 1, 1))
        z[:, : self.max_tokens, 0, 0] = (x + 0.5) / self.vocab_size * 2.0 - 1.0
        return z if batched else z[0]

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        batched = z.ndim == 4
        x = z if batched else z[None]
        slots = x[:, : self.max_tokens, 0, 0]
        ids = np.rint((slots + 1.0) / 2.0 * self.vocab_size - 0.5).astype(np.int64)
        ids = np.clip(ids, 0, self.vocab_size - 1)
        return ids if batched else ids[0]


# ---------------------------------------------------------------------------
# shared helpers


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Fixed token-count resampler: strided mean-pool down, index repeat up."""
    if n_in <= 0 or n_out <= 0:
        raise ModalityError(f"bad token counts {n_in} -> {n_out}")
    P = np.zeros((n_out, n_in))
    if n_in >= n_out:
        bounds = (np.arange(n_out + 1) * n_in) // n_out
        for i in range(n_out):
            lo, hi = bounds[i], bounds[i + 1]
            P[i, lo:hi] = 1.0 / (hi - lo)
    else:
        src = (np.arange(n_out) * n_in) // n_out
        P[np.arange(n_out), src] = 1.0
    return P


def _linear_init(rng, n_in, n_out, scale=None):
    scale = scale if scale is not None else 1.0 / np.sqrt(n_in)
    return rng.normal(0.0, scale, size=(n_in, n_out))


def _batch_matmul(x: Tensor, w: Tensor) -> Tensor:
    """(..., n) @ (n, m) weight application, flattened to one 2-D matmul."""
    if x.ndim == 2:
        return T.matmul(x, w)
    lead = x.shape[:-1]
    flat = T.reshape(x, (int(np.prod(lead)), x.shape[-1]))
    return T.reshape(T.matmul(flat, w), lead + (w.shape[1],))


def sinusoid_table(n: int, dim: int) -> np.ndarray:
    """Fixed positional encodings (not learned)."""
    pos = np.arange(n)[:, None]
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(pos * freqs)
    table[:, 1::2] = np.cos(pos * freqs)
    return table


# ---------------------------------------------------------------------------
# prompt encoders C_M


class ImagePromptEncoder:
    """Small conv trunk over 1xHxW renders, pooled to 4x4, linear to embed_dim."""

    def __init__(self, spec: ModalitySpec, rng: np.random.Generator):
        self.spec = spec
        d = spec.embed_dim
        self.params = {
            "conv1.w": Tensor(rng.normal(0, 0.3, (8, 1, 3, 3)), requires_grad=True),
            "conv1.b": Tensor(np.zeros(8), requires_grad=True),
            "conv2.w": Tensor(rng.normal(0, 0.1, (16, 8, 3, 3)), requires_grad=True),
            "conv2.b": Tensor(np.zeros(16), requires_grad=True),
            "fc.w": Tensor(_linear_init(rng, 16 * 4 * 4, d), requires_grad=True),
            "fc.b": Tensor(np.zeros(d), requires_grad=True),
        }

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        B, C, H, W = x.shape
        if C != 1 or H % 4 or W % 4 or H != W:
            raise ModalityError(f"image encoder wants (B,1,4k,4k) inputs, got {x.shape}")
        p = self.params
        h = T.silu(T.conv2d(x, p["conv1.w"], p["conv1.b"]))
        h = T.avg_pool2d(h, 2)
        h = T.silu(T.conv2d(h, p["conv2.w"], p["conv2.b"]))
        if h.shape[2] > 4:
            h = T.avg_pool2d(h, h.shape[2] // 4)
        h = T.reshape(h, (B, 16 * 4 * 4))
        h = T.add(T.matmul(h, p["fc.w"]), p["fc.b"])
        return T.unit_normalize(h, axis=1)


class TextPromptEncoder:
    """Token embeddings with fixed positional offsets, mean-pooled, linear head."""

    def __init__(self, spec: ModalitySpec, rng: np.random.Generator,
                 vocab_size: int, max_tokens: int):
        self.spec = spec
        self.max_tokens = max_tokens
        d = spec.embed_dim
        self.pos = sinusoid_table(max_tokens, d) * 0.5
        self.params = {
            "embed": Tensor(rng.normal(0, 0.5, (vocab_size, d)), requires_grad=True),
            "fc.w": Tensor(_linear_init(rng, d, d), requires_grad=True),
            "fc.b": Tensor(np.zeros(d), requires_grad=True),
        }

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        batched = ids.ndim == 2
        if not batched:
            ids = ids[None]
        if ids.shape[1] != self.max_tokens:
            raise ModalityError(f"expected {self.max_tokens} padded tokens, got {ids.shape}")
        p = self.params
        tok = T.take_rows(p["embed"], ids)            # (B, L, d)
        tok = T.add(tok, Tensor(self.pos))            # trailing (L, d) broadcast
        pooled = T.tmean(tok, axis=1)                 # (B, d)
        h = T.add(T.matmul(pooled, p["fc.w"]), p["fc.b"])
        return T.unit_normalize(h, axis=1)


def encode_prompt(encoder, x) -> Tensor:
    """Unit-norm shared-space embedding of a raw modality sample (or batch)."""
    return encoder(x)


# ---------------------------------------------------------------------------
# guided adaptation f_B


@dataclass
class GuidedAdaptation:
    """Trainable context tokens seeded from a partner modality's embeddings."""

    source: str
    tokens: Tensor  # (context_len_target, embed_dim), requires_grad

    @property
    def shape(self):
        return self.tokens.shape


def build_adaptation(z_B, spec_A: ModalitySpec, phi_s=None, F_emb=None,
                     source: str = "?") -> GuidedAdaptation:
    """Initialize f_B = F_emb(phi_s(z_B)) as fresh trainable tokens.

    z_B is a (n, d) stack of the source modality's embeddings (a single (d,)
    vector is treated as one token). phi_s defaults to strided mean-pooling
    of the token axis down to spec_A.context_len. The returned tokens share
    no storage with z_B.
    """
    if spec_A.context_len <= 0:
        raise ModalityError(f"receiving modality has context_len {spec_A.context_len}")
    z = np.asarray(z_B.data if isinstance(z_B, Tensor) else z_B, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != spec_A.embed_dim:
        raise ModalityError(f"z_B must be (n, {spec_A.embed_dim}), got {z.shape}")
    pooled = phi_s(z) if phi_s is not None else resample_matrix(z.shape[0], spec_A.context_len) @ z
    pooled = np.asarray(pooled)
    if pooled.shape != (spec_A.context_len, spec_A.embed_dim):
        raise ModalityError(
            f"phi_s produced {pooled.shape}, expected "
            f"({spec_A.context_len}, {spec_A.embed_dim})"
        )
    if F_emb is not None:
        w = F_emb.data if isinstance(F_emb, Tensor) else np.asarray(F_emb)
        pooled = pooled @ w
    return GuidedAdaptation(source, Tensor(pooled.copy(), requires_grad=True))


# ---------------------------------------------------------------------------
# context encoders V_M


class ContextEncoder:
    """Projects a modality's noisy latent to shared-space tokens, appends the
    guided adaptation, and mixes with one pre-norm self-attention block.

    The attention output projection is zero-initialized, so at init the
    encoder returns exactly the concatenation of projected latent tokens and
    adaptation tokens.
    """

    def __init__(self, spec: ModalitySpec, rng: np.random.Generator, heads: int = 4):
        self.spec = spec
        self.heads = heads
        c = spec.latent_shape[0]
        d = spec.embed_dim
        if d % heads:
            raise ModalityError(f"embed_dim {d} not divisible by heads {heads}")
        self.pool = resample_matrix(spec.latent_shape[1] * spec.latent_shape[2],
                                    spec.context_len)
        self.params = {
            "tok.w": Tensor(_linear_init(rng, c, d), requires_grad=True),
            "attn.wq": Tensor(_linear_init(rng, d, d), requires_grad=True),
            "attn.wk": Tensor(_linear_init(rng, d, d), requires_grad=True),
            "attn.wv": Tensor(_linear_init(rng, d, d), requires_grad=True),
            "attn.wo": Tensor(np.zeros((d, d)), requires_grad=True),
        }

    def latent_tokens(self, z_t) -> Tensor:
        """(B, C, H, W) latent -> (B, context_len, embed_dim) shared-space tokens."""
        z_t = T.as_tensor(z_t)
        if z_t.ndim == 3:
            z_t = T.reshape(z_t, (1,) + z_t.shape)
        B, C, H, W = z_t.shape
        if (C, H, W) != tuple(self.spec.latent_shape):
            raise ModalityError(
                f"latent {z_t.shape[1:]} != {self.spec.name} spec {self.spec.latent_shape}"
            )
        seq = T.transpose(T.reshape(z_t, (B, C, H * W)), (0, 2, 1))  # (B, HW, C)
        P = T.broadcast_to(Tensor(self.pool[None]), (B,) + self.pool.shape)
        pooled = T.matmul(P, seq)                                    # (B, k, C)
        return _batch_matmul(pooled, self.params["tok.w"])           # (B, k, d)

    def __call__(self, z_t, f: GuidedAdaptation) -> Tensor:
        lat = self.latent_tokens(z_t)
        B = lat.shape[0]
        ftok = f.tokens
        if ftok.ndim == 2:
            ftok = T.broadcast_to(T.reshape(ftok, (1,) + ftok.shape), (B,) + ftok.shape)
        if ftok.shape[-1] != self.spec.embed_dim:
            raise ModalityError(
                f"adaptation width {ftok.shape[-1]} != embed_dim {self.spec.embed_dim}"
            )
        x = T.concat([lat, ftok], axis=1)  # (B, S, d)
        return T.add(x, self._attend(x))

    def _attend(self, x: Tensor) -> Tensor:
        p = self.params
        B, S, d = x.shape
        h = self.heads
        dh = d // h
        xn = T.layer_norm(x, axis=-1)

        def split(t):
            return T.transpose(T.reshape(t, (B, S, h, dh)), (0, 2, 1, 3))

        q = split(_batch_matmul(xn, p["attn.wq"]))
        k = split(_batch_matmul(xn, p["attn.wk"]))
        v = split(_batch_matmul(xn, p["attn.wv"]))
        scores = T.mul(T.matmul(q, T.swap_last2(k)), 1.0 / np.sqrt(dh))
        mixed = T.matmul(T.softmax(scores, axis=-1), v)          # (B, h, S, dh)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (B, S, d))
        return _batch_matmul(merged, p["attn.wo"])


def encode_context(V_B: ContextEncoder, z_t_B, f_B: GuidedAdaptation) -> Tensor:
    """Shared-space context token sequence for conditioning a partner diffuser."""
    return V_B(z_t_B, f_B)
