"""Held-out evaluations: retrieval across the shared space, conditional
denoising gain from cross-guided contexts, and conditional generation
fidelity (PSNR against ground-truth renders)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .codecs import encode_context
from .sampler import SamplerConfig, sample_conditioned
from .schedule import forward_diffuse
from .toybench import PairedDataset, psnr, retrieval_topk, ssim


def eval_retrieval(system, val_seeds, pairs=None, k: int = 1) -> dict:
    """Top-k retrieval accuracy per modality pair on validation scenes."""
    pairs = pairs or [("text", "xray"), ("text", "ct"), ("ct", "mri"), ("xray", "mri")]
    out = {}
    with T.no_grad():
        for pair in pairs:
            ds = PairedDataset.generate(pair, val_seeds)
            za = system.embed(pair[0], ds.samples_a).data
            zb = system.embed(pair[1], ds.samples_b).data
            out[f"retrieval_{pair[0]}_{pair[1]}"] = retrieval_topk(za, zb, k)
    return out


def eval_guidance_gap(system, target: str, source: str, val: PairedDataset,
                      seed: int = 0, t_fracs=(0.2, 0.45, 0.7)) -> dict:
    """Held-out denoising loss with the matched cross-guided context versus
    the null context, averaged over the validation pairs at fixed timesteps."""
    sched = system.train_schedule
    flip = val.pair[0] != target
    raw_t = val.samples_b if flip else val.samples_a
    raw_s = val.samples_a if flip else val.samples_b
    z0_t = system.encode_latent(target, raw_t)
    z0_s = system.encode_latent(source, raw_s)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    model = system.diffusers[target]
    matched, null = [], []
    with T.no_grad():
        for frac in t_fracs:
            t = max(1, int(frac * sched.T))
            eps_t = rng.standard_normal(z0_t.shape)
            eps_s = rng.standard_normal(z0_s.shape)
            z_t = forward_diffuse(Tensor(z0_t), t, Tensor(eps_t), sched)
            z_t_s = forward_diffuse(Tensor(z0_s), t, Tensor(eps_s), sched)
            ctx = encode_context(system.context_encoders[source], z_t_s,
                                 system.adaptations[source])
            for context, bucket in ((ctx, matched), (None, null)):
                eps_hat = model.predict_eps(z_t, t, context)
                bucket.append(float(np.mean((eps_t - eps_hat.data) ** 2)))
    m, n = float(np.mean(matched)), float(np.mean(null))
    return {"matched_loss": m, "null_loss": n, "gap_frac": (n - m) / n if n else 0.0}


def eval_generation(system, target: str, source: str, val: PairedDataset,
                    cfg: SamplerConfig, pinned: bool = True) -> dict:
    """Conditional generation PSNR: latents sampled with the matched partner
    context, versus a cyclic mismatch of the same contexts, both scored
    against the ground-truth renders of the target modality."""
    flip = val.pair[0] != target
    raw_t = val.samples_b if flip else val.samples_a
    raw_s = val.samples_a if flip else val.samples_b
    z0_s = system.encode_latent(source, raw_s)
    mism = np.roll(z0_s, 1, axis=0)  # derangement: every context is wrong

    scores = {}
    for tag, src_latents in (("matched", z0_s), ("mismatched", mism)):
        z = sample_conditioned(system, target, source, src_latents, cfg, pinned=pinned)
        decoded = system.decode_latent(target, z.data)
        vals_p, vals_s = [], []
        for i in range(len(raw_t)):
            img = np.clip(decoded[i], 0.0, 1.0)
            vals_p.append(psnr(img, raw_t[i]))
            vals_s.append(ssim(img, raw_t[i]))
        scores[f"psnr_{tag}"] = float(np.mean(vals_p))
        scores[f"ssim_{tag}"] = float(np.mean(vals_s))
    scores["psnr_gap_db"] = scores["psnr_matched"] - scores["psnr_mismatched"]
    return scores
