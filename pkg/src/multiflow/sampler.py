"""DDPM ancestral and DDIM samplers with classifier-free guidance, plus
joint multi-modal sampling where co-diffusing flows condition each other.

All step noise comes from a counter-based generator keyed by
(seed, flow, step), so runs are bit-reproducible and a flow draws the same
noise whether it samples alone or inside a joint run.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError
from .codecs import encode_context
from .schedule import NoiseSchedule, ScheduleError, posterior_mean, forward_diffuse


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    eta: float = 1.0
    guidance_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise SamplerError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise SamplerError(f"eta must lie in [0, 1], got {self.eta}")
        if self.guidance_scale < 0.0:
            raise SamplerError(f"guidance scale must be >= 0, got {self.guidance_scale}")


def cfg_eps(eps_cond, eps_uncond, s: float):
    """Classifier-free guidance blend: uncond + s * (cond - uncond)."""
    eps_cond, eps_uncond = T.as_tensor(eps_cond), T.as_tensor(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"cfg shapes differ: {eps_cond.shape} vs {eps_uncond.shape}")
    return T.add(eps_uncond, T.mul(T.sub(eps_cond, eps_uncond), float(s)))


def ddim_sigma(t: int, t_prev: int, eta: float, s: NoiseSchedule) -> float:
    ab_t, ab_p = s.abar(t), s.abar(t_prev)
    return float(eta * np.sqrt((1 - ab_p) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_p))


def ddim_step(z_t, eps_hat, t: int, t_prev: int, eta: float, s: NoiseSchedule,
              noise=None):
    """One implicit-sampler update from step t to t_prev (t_prev may be 0)."""
    if not t > t_prev >= 0:
        raise ScheduleError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    z_t, eps_hat = T.as_tensor(z_t), T.as_tensor(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"z_t shape {z_t.shape} != eps_hat shape {eps_hat.shape}")
    ab_t, ab_p = s.abar(t), s.abar(t_prev)
    sigma = ddim_sigma(t, t_prev, eta, s)
    if eta > 0.0 and sigma > 0.0 and noise is None:
        raise SamplerError("eta > 0 requires step noise")
    z0_hat = T.mul(T.sub(z_t, T.mul(eps_hat, np.sqrt(1 - ab_t))), 1.0 / np.sqrt(ab_t))
    rem = max(1.0 - ab_p - sigma * sigma, 0.0)
    out = T.add(T.mul(z0_hat, np.sqrt(ab_p)), T.mul(eps_hat, np.sqrt(rem)))
    if sigma > 0.0:
        out = T.add(out, T.mul(T.as_tensor(noise), sigma))
    return out


def ddpm_step(z_t, eps_hat, t: int, s: NoiseSchedule, noise=None):
    """One ancestral update; the final step (t=1) adds no noise."""
    mu = posterior_mean(z_t, eps_hat, t, s)
    if t == 1:
        return mu
    if noise is None:
        raise SamplerError("ddpm_step needs noise for t > 1")
    return T.add(mu, T.mul(T.as_tensor(noise), float(np.sqrt(s.beta[t - 1]))))


def timestep_grid(T_steps: int, n: int) -> list:
    """Uniform-stride descending subsequence of [1, T], always containing T
    and 1; the sampler's final transition then jumps to 0."""
    n = min(int(n), int(T_steps))
    ts = np.unique(np.rint(np.linspace(T_steps, 1, n)).astype(int))[::-1]
    return [int(t) for t in ts]


def keyed_noise(seed: int, flow: str, kind: int, step: int, shape) -> np.ndarray:
    ss = np.random.SeedSequence([int(seed) & 0x7FFFFFFF, zlib.crc32(flow.encode()),
                                 int(kind), int(step)])
    return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


_KIND_INIT, _KIND_STEP, _KIND_PIN = 0, 1, 2


def sample(model, context, cfg: SamplerConfig, schedule: NoiseSchedule,
           n: int = 1, flow: str | None = None, context_fn=None) -> Tensor:
    """DDIM sampling from pure noise down to a clean latent.

    `context` is a fixed token tensor or None; `context_fn`, when given,
    rebuilds the context at each visited timestep (used by conditioned and
    joint generation).
    """
    flow = flow or model.spec.name
    shape = (n,) + tuple(model.spec.latent_shape)
    with T.no_grad():
        z = Tensor(keyed_noise(cfg.seed, flow, _KIND_INIT, schedule.T, shape))
        ts = timestep_grid(schedule.T, cfg.steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            ctx = context_fn(t) if context_fn is not None else context
            eps_u = model.predict_eps(z, t, None)
            if ctx is None:
                e = eps_u
            elif cfg.guidance_scale == 1.0:
                e = model.predict_eps(z, t, ctx)
            else:
                e = cfg_eps(model.predict_eps(z, t, ctx), eps_u, cfg.guidance_scale)
            noise = None
            if cfg.eta > 0.0 and t_prev > 0:
                noise = keyed_noise(cfg.seed, flow, _KIND_STEP, t, shape)
            z = ddim_step(z, e, t, t_prev, cfg.eta, schedule, noise)
    return z


def pinned_context_fn(system, source: str, z0_source: np.ndarray):
    """Per-step context from a known partner sample: the partner latent is
    pinned to its noise-free forward trajectory sqrt(abar_t) z0, matching the
    distribution the cross-guided loss trained on."""
    z0 = np.asarray(z0_source)
    sched = system.train_schedule
    V = system.context_encoders[source]
    f = system.adaptations[source]

    def fn(t):
        t_eff = min(int(t), sched.T)
        z_t = forward_diffuse(Tensor(z0), t_eff, Tensor(np.zeros_like(z0)), sched)
        return encode_context(V, z_t, f)

    return fn


def clean_context(system, source: str, z0_source: np.ndarray) -> Tensor:
    """Fixed context tokens from the partner's clean latent."""
    with T.no_grad():
        return encode_context(system.context_encoders[source],
                              Tensor(np.asarray(z0_source)),
                              system.adaptations[source])


def sample_conditioned(system, target: str, source: str, z0_source: np.ndarray,
                       cfg: SamplerConfig, schedule: NoiseSchedule | None = None,
                       pinned: bool = True) -> Tensor:
    """Generate `target` latents conditioned on known `source` latents."""
    schedule = schedule or system.train_schedule
    model = system.diffusers[target]
    n = 1 if np.asarray(z0_source).ndim == 3 else np.asarray(z0_source).shape[0]
    if pinned:
        return sample(model, None, cfg, schedule, n=n,
                      context_fn=pinned_context_fn(system, source, z0_source))
    return sample(model, clean_context(system, source, z0_source), cfg, schedule, n=n)


def joint_sample(system, cfg: SamplerConfig, names=None,
                 schedule: NoiseSchedule | None = None) -> dict:
    """Co-diffuse several flows on a shared timestep grid; at every step each
    flow's context is rebuilt from the other flows' current latents through
    their context encoders and trained adaptations."""
    names = list(names) if names is not None else [m for m in system.specs]
    schedule = schedule or system.train_schedule
    for m in names:
        if m not in system.context_encoders:
            raise SamplerError(f"no context encoder registered for {m}")
    with T.no_grad():
        z = {
            m: Tensor(keyed_noise(cfg.seed, m, _KIND_INIT, schedule.T,
                                  (1,) + tuple(system.specs[m].latent_shape)))
            for m in names
        }
        ts = timestep_grid(schedule.T, cfg.steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            nxt = {}
            for m in names:
                partners = [p for p in names if p != m]
                if partners:
                    ctx = T.concat(
                        [encode_context(system.context_encoders[p], z[p],
                                        system.adaptations[p]) for p in partners],
                        axis=1,
                    )
                else:
                    ctx = None
                model = system.diffusers[m]
                eps_u = model.predict_eps(z[m], t, None)
                if ctx is None:
                    e = eps_u
                elif cfg.guidance_scale == 1.0:
                    e = model.predict_eps(z[m], t, ctx)
                else:
                    e = cfg_eps(model.predict_eps(z[m], t, ctx), eps_u, cfg.guidance_scale)
                noise = None
                if cfg.eta > 0.0 and t_prev > 0:
                    noise = keyed_noise(cfg.seed, m, _KIND_STEP, t, z[m].shape)
                nxt[m] = ddim_step(z[m], e, t, t_prev, cfg.eta, schedule, noise)
            z = nxt
    return z
