"""Training objectives: noise prediction, symmetric InfoNCE alignment,
view-invariance (cross-correlation) preservation, and the cross-guided loss.

All four are scalar tensors built from engine primitives, so their gradients
fall out of the graph and are covered by the finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .codecs import GuidedAdaptation, ContextEncoder, encode_context
from .schedule import NoiseSchedule, forward_diffuse


class ObjectiveError(ValueError):
    pass


# ---------------------------------------------------------------------------
# diffusion loss (noise prediction)


def diffusion_loss(model, z0, t, eps, context=None, schedule: NoiseSchedule = None) -> Tensor:
    """Mean squared error between the injected and the predicted noise."""
    if schedule is None:
        raise ObjectiveError("diffusion_loss needs a schedule")
    z0, eps = T.as_tensor(z0), T.as_tensor(eps)
    if z0.shape != eps.shape:
        raise T.ShapeError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    z_t = forward_diffuse(z0, t, eps, schedule)
    eps_hat = model.predict_eps(z_t, t, context)
    diff = T.sub(eps, eps_hat)
    return T.tmean(T.mul(diff, diff))


# ---------------------------------------------------------------------------
# central alignment (InfoNCE)


@dataclass
class ContrastiveBatch:
    zA: Tensor  # (N, d) unit-norm rows; zA[i] pairs with zB[i]
    zB: Tensor
    tau: object = 0.07  # float or scalar Tensor

    def __post_init__(self):
        zA, zB = T.as_tensor(self.zA), T.as_tensor(self.zB)
        if zA.ndim != 2 or zA.shape != zB.shape:
            raise ObjectiveError(f"need matching (N, d) embeddings, got {zA.shape} / {zB.shape}")
        for name, z in (("zA", zA), ("zB", zB)):
            norms = np.linalg.norm(z.data, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-4):
                raise ObjectiveError(f"{name} rows must be unit-norm")
        self.zA, self.zB = zA, zB


def _nce_direction(logits: Tensor) -> Tensor:
    """Mean over anchors of -(positive logit - logsumexp over candidates)."""
    n = logits.shape[0]
    shift = np.max(logits.data, axis=1, keepdims=True)  # constant; lse is shift-exact
    e = T.exp(T.sub(logits, T.broadcast_to(Tensor(shift), logits.shape)))
    lse = T.add(T.log(T.tsum(e, axis=1)), Tensor(shift[:, 0]))
    pos = T.tsum(T.mul(logits, Tensor(np.eye(n))), axis=1)
    return T.tmean(T.sub(lse, pos))


def infonce_central(batch: ContrastiveBatch) -> Tensor:
    """Symmetric InfoNCE: A->B plus B->A, in-batch negatives, temperature tau."""
    tau = batch.tau
    if isinstance(tau, Tensor):
        if tau.data.size != 1 or tau.item() <= 0:
            raise ObjectiveError("tau must be a positive scalar")
        sims = T.matmul(batch.zA, T.transpose(batch.zB))
        logits = T.div(sims, T.broadcast_to(T.reshape(tau, (1, 1)), sims.shape))
    else:
        if float(tau) <= 0:
            raise ObjectiveError(f"tau must be positive, got {tau}")
        logits = T.mul(T.matmul(batch.zA, T.transpose(batch.zB)), 1.0 / float(tau))
    return T.add(_nce_direction(logits), _nce_direction(T.transpose(logits)))


# ---------------------------------------------------------------------------
# view-invariance preservation (cross-correlation to identity)


@dataclass
class ViewPair:
    Z1: Tensor  # (K, d) embeddings of two augmented views
    Z2: Tensor
    lambda1: float = 5e-3

    def __post_init__(self):
        Z1, Z2 = T.as_tensor(self.Z1), T.as_tensor(self.Z2)
        if Z1.ndim != 2 or Z1.shape != Z2.shape or Z1.shape[0] < 2:
            raise ObjectiveError(f"need matching (K>=2, d) views, got {Z1.shape} / {Z2.shape}")
        if self.lambda1 < 0:
            raise ObjectiveError("lambda1 must be non-negative")
        self.Z1, self.Z2 = Z1, Z2


VI_VARIANCE_FLOOR = 1e-8


def vi_normalize(Z, flags: list | None = None) -> Tensor:
    """Column-normalize a (K, d) batch to zero mean and unit L2 norm
    (std 1/sqrt(K)), so cross-correlation entries are true correlations.

    Zero-variance columns hit the variance floor and map to zeros; their
    indices are appended to ``flags`` when a list is supplied.
    """
    Z = T.as_tensor(Z)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ObjectiveError(f"vi_normalize needs (K>=2, d), got {Z.shape}")
    K = Z.shape[0]
    mu = T.tmean(Z, axis=0, keepdims=True)
    centered = T.sub(Z, T.broadcast_to(mu, Z.shape))
    var = T.tmean(T.mul(centered, centered), axis=0, keepdims=True)
    if flags is not None:
        flags.extend(np.nonzero(var.data[0] < VI_VARIANCE_FLOOR)[0].tolist())
    floored = T.clamp(var, lo=VI_VARIANCE_FLOOR)
    scale = T.pow_const(T.mul(floored, float(K)), -0.5)
    return T.mul(centered, T.broadcast_to(scale, Z.shape))


def vi_barlow(pair: ViewPair) -> Tensor:
    """Drive the views' cross-correlation toward the identity matrix.

    Diagonal term: mean over features of (1 - C_ii)^2. Off-diagonal term:
    lambda1 times the mean of squared off-diagonal entries (zero when d < 2).
    Normalization is idempotent, so already-normalized views pass through.
    """
    Z1 = vi_normalize(pair.Z1)
    Z2 = vi_normalize(pair.Z2)
    C = T.matmul(T.transpose(Z1), Z2)  # (d, d) correlations
    d = C.shape[0]
    eye = np.eye(d)
    diag = T.tsum(T.mul(C, Tensor(eye)), axis=1)
    ones = Tensor(np.ones(d))
    dterm = T.tmean(T.mul(T.sub(ones, diag), T.sub(ones, diag)))
    if d < 2:
        return dterm
    off = T.mul(C, Tensor(1.0 - eye))
    oterm = T.mul(T.tsum(T.mul(off, off)), 1.0 / (d * (d - 1)))
    return T.add(dterm, T.mul(oterm, pair.lambda1))


# ---------------------------------------------------------------------------
# cross-guided conditioning loss


def cross_guided_loss(model_A, z0_A, t, eps, z_t_B, f_B: GuidedAdaptation,
                      V_B: ContextEncoder, schedule: NoiseSchedule) -> Tensor:
    """Noise-prediction loss for modality A conditioned on the partner's noisy
    latent and adaptation tokens through the partner's context encoder."""
    context = encode_context(V_B, z_t_B, f_B)
    return diffusion_loss(model_A, z0_A, t, eps, context=context, schedule=schedule)


# ---------------------------------------------------------------------------
# view augmentations (data-side, no gradients)


def augment_image_views(images: np.ndarray, rng: np.random.Generator,
                        noise_sigma: float = 0.05) -> tuple:
    """Two augmented views of a (B, 1, H, W) batch: random horizontal flip,
    +-1 pixel translation, Gaussian noise, clipped back to [0, 1]."""
    views = []
    for _ in range(2):
        v = np.array(images, dtype=np.float64, copy=True)
        B, _, H, W = v.shape
        flips = rng.random(B) < 0.5
        v[flips] = v[flips, :, :, ::-1]
        shifts = rng.integers(-1, 2, size=(B, 2))
        for b in range(B):
            dy, dx = shifts[b]
            v[b, 0] = _shift2d(v[b, 0], dy, dx)
        v = np.clip(v + rng.normal(0.0, noise_sigma, v.shape), 0.0, 1.0)
        views.append(v)
    return views[0], views[1]


def _shift2d(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    H, W = img.shape
    ys = slice(max(dy, 0), H + min(dy, 0))
    xs = slice(max(dx, 0), W + min(dx, 0))
    ys_src = slice(max(-dy, 0), H + min(-dy, 0))
    xs_src = slice(max(-dx, 0), W + min(-dx, 0))
    out[ys, xs] = img[ys_src, xs_src]
    return out


def augment_text_views(ids: np.ndarray, rng: np.random.Generator,
                       drop_p: float = 0.1, pad_id: int = 0) -> tuple:
    """Two token-dropout views of a (B, L) id batch; the leading token and
    at least one token always survive."""
    views = []
    for _ in range(2):
        v = np.array(ids, dtype=np.int64, copy=True)
        drop = rng.random(v.shape) < drop_p
        drop[:, 0] = False
        v[drop & (v != pad_id)] = pad_id
        views.append(v)
    return views[0], views[1]
