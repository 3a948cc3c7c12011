"""Training orchestration: encoder alignment rounds, single-modal diffuser
pretraining, and the 3-round cross-guided flow schedule with freezing.

Freezing is structural: frozen parameters have requires_grad switched off
(so they accumulate no gradient) and are never handed to the optimizer.
Each round's trainable/frozen sets partition the full parameter universe.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import toybench
from .checkpoint import load_checkpoint, save_checkpoint
from .codecs import (
    ContextEncoder,
    GuidedAdaptation,
    ImageLatentCodec,
    ImagePromptEncoder,
    ModalitySpec,
    TextLatentCodec,
    TextPromptEncoder,
    build_adaptation,
    default_modalities,
    encode_context,
)
from .denoiser import DiffuserModel
from .objectives import (
    ContrastiveBatch,
    ViewPair,
    augment_image_views,
    augment_text_views,
    diffusion_loss,
    infonce_central,
    vi_barlow,
)
from .schedule import NoiseSchedule, forward_diffuse, make_schedule


class PlanError(ValueError):
    pass


class CoverageError(ValueError):
    """A modality has no paired-data path to the hub (or a round lacks data)."""


class TrainingAbort(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


HUB = "text"
ALIGN_PAIRS = (("text", "xray"), ("text", "ct"), ("ct", "mri"))
FLOW_PAIRS = (("text", "xray"), ("text", "ct"), ("ct", "mri"))


# ---------------------------------------------------------------------------
# the system container


class MultiFlowSystem:
    """All per-modality components plus shared alignment state."""

    def __init__(self, cfg: dict, seed: int | None = None):
        self.cfg = cfg
        self.seed = int(cfg["seed"]) if seed is None else int(seed)
        embed_dim = int(cfg["embed_dim"])
        context_len = int(cfg["context_len"])
        channels = int(cfg["channels"])
        heads = int(cfg["heads"])
        self.specs = default_modalities(embed_dim, context_len)
        self.train_schedule = make_schedule(
            cfg["schedule"], int(cfg["T"]), float(cfg["beta0"]), float(cfg["betaT"])
        )

        self.image_codec = ImageLatentCodec()
        self.text_codec = TextLatentCodec(toybench.VOCAB_SIZE, toybench.MAX_TOKENS, embed_dim)

        def rng_for(tag: str):
            # crc32 rather than hash(): stable across processes
            return np.random.default_rng(
                np.random.SeedSequence([self.seed, zlib.crc32(tag.encode())])
            )

        self.prompt_encoders = {}
        self.context_encoders = {}
        self.diffusers = {}
        self.adaptations = {}
        self.f_emb = {}
        for name, spec in self.specs.items():
            if spec.kind == "image":
                self.prompt_encoders[name] = ImagePromptEncoder(spec, rng_for(f"prompt.{name}"))
            else:
                self.prompt_encoders[name] = TextPromptEncoder(
                    spec, rng_for(f"prompt.{name}"), toybench.VOCAB_SIZE, toybench.MAX_TOKENS
                )
            self.context_encoders[name] = ContextEncoder(spec, rng_for(f"ctx.{name}"), heads)
            self.diffusers[name] = DiffuserModel(spec, rng_for(f"diff.{name}"), channels, heads)
            emb_rng = rng_for(f"femb.{name}")
            self.f_emb[name] = Tensor(
                emb_rng.normal(0, 1 / np.sqrt(embed_dim), (embed_dim, embed_dim))
            )
            self.adaptations[name] = GuidedAdaptation(
                name, Tensor(np.zeros((context_len, embed_dim)), requires_grad=True)
            )
        self.log_tau = Tensor(np.array(np.log(float(cfg["tau_init"]))), requires_grad=True)

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> dict:
        out = {}
        for m in self.specs:
            for k, p in self.prompt_encoders[m].params.items():
                out[f"{m}.prompt.{k}"] = p
            for k, p in self.context_encoders[m].params.items():
                out[f"{m}.ctx.{k}"] = p
            for k, p in self.diffusers[m].params.items():
                out[f"{m}.diffuser.{k}"] = p
            out[f"{m}.adapt"] = self.adaptations[m].tokens
            out[f"{m}.femb"] = self.f_emb[m]
        out["align.log_tau"] = self.log_tau
        return out

    def set_trainable(self, names) -> None:
        names = set(names)
        for key, p in self.named_params().items():
            p.requires_grad = key in names
            p.grad = None

    def tau(self) -> Tensor:
        return T.clamp(T.exp(self.log_tau), lo=0.01, hi=0.5)

    # -- data plumbing ------------------------------------------------------

    def encode_latent(self, modality: str, samples: np.ndarray) -> np.ndarray:
        if self.specs[modality].kind == "image":
            return self.image_codec.encode(samples)
        return self.text_codec.encode(samples)

    def decode_latent(self, modality: str, z: np.ndarray):
        if self.specs[modality].kind == "image":
            return self.image_codec.decode(z)
        return self.text_codec.decode(z)

    def embed(self, modality: str, samples: np.ndarray) -> Tensor:
        return self.prompt_encoders[modality](samples)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        registry = [
            {"name": s.name, "latent_shape": s.latent_shape,
             "context_len": s.context_len, "embed_dim": s.embed_dim}
            for s in self.specs.values()
        ]
        save_checkpoint(path, registry, {k: p.data for k, p in self.named_params().items()})

    @classmethod
    def load(cls, path, cfg: dict) -> "MultiFlowSystem":
        registry, params = load_checkpoint(path)
        system = cls(cfg)
        want = {m["name"] for m in registry}
        if want != set(system.specs):
            raise PlanError(f"checkpoint modalities {sorted(want)} != {sorted(system.specs)}")
        own = system.named_params()
        missing = set(own) - set(params)
        if missing:
            raise PlanError(f"checkpoint lacks parameters: {sorted(missing)[:5]} ...")
        for name, p in own.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise PlanError(f"checkpoint shape {arr.shape} != {p.shape} for {name}")
            p.data = arr
        return system


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Decoupled-weight-decay Adam over named parameter groups."""

    groups: list  # each: {"params": {name: Tensor}, "lr": float, "weight_decay": float}
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for g in self.groups:
            for name, p in g["params"].items():
                if name in seen:
                    raise PlanError(f"parameter {name} appears in two optimizer groups")
                seen.add(name)
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def param_names(self):
        return set(self.m)

    def step(self, grads: dict | None = None) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            for name, p in g["params"].items():
                grad = grads.get(name) if grads is not None else p.grad
                if grad is None:
                    continue
                grad = np.asarray(grad)
                if grad.shape != p.data.shape:
                    raise T.ShapeError(f"grad shape {grad.shape} != param {p.data.shape} for {name}")
                self.m[name] = b1 * self.m[name] + (1 - b1) * grad
                self.v[name] = b2 * self.v[name] + (1 - b2) * grad * grad
                mhat = self.m[name] / bias1
                vhat = self.v[name] / bias2
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
                if wd:
                    p.data = p.data - lr * wd * p.data

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"].values():
                p.grad = None


def adam_step(state: AdamState, grads: dict | None = None) -> None:
    state.step(grads)


# ---------------------------------------------------------------------------
# flow plan


@dataclass
class FlowRound:
    name: str
    pair: tuple
    trainable: set
    frozen: set
    dataset: toybench.PairedDataset
    steps: int


@dataclass
class FlowPlan:
    rounds: list


def _modality_param_names(system: MultiFlowSystem, m: str) -> set:
    return {k for k in system.named_params() if k.startswith(f"{m}.")}


def _ca_names(system: MultiFlowSystem, m: str) -> set:
    return {f"{m}.diffuser.{k}" for k in system.diffusers[m].cross_attention_names}


def _round_trainable(system: MultiFlowSystem, new_modalities) -> set:
    names = set()
    for m in new_modalities:
        names |= _ca_names(system, m)
        names |= {k for k in system.named_params() if k.startswith(f"{m}.ctx.")}
        names.add(f"{m}.adapt")
    return names


def default_plan(system: MultiFlowSystem, datasets: dict, steps: int | None = None,
                 init_batch: int = 8) -> FlowPlan:
    """The 3-round schedule: (text, xray) training both sides' conditioning
    stacks, then (text, ct) with text frozen, then (ct, mri) with ct frozen.

    Also (re)initializes every modality's adaptation tokens from a batch of
    its prompt embeddings pushed through phi_s and the embedding layer.
    """
    for m in ("text", "xray", "ct", "mri"):
        if m not in system.specs or m not in system.diffusers:
            raise PlanError(f"modality {m} is not registered with a diffuser")
    missing = [p for p in FLOW_PAIRS if p not in datasets]
    if missing:
        raise CoverageError(f"no paired dataset for {missing[0][0]}-{missing[0][1]}")
    steps = int(system.cfg["flow_steps"]) if steps is None else int(steps)

    seen = set()
    for pair in FLOW_PAIRS:
        for m in pair:
            if m in seen:
                continue
            ds = datasets[pair]
            samples = ds.samples_a if ds.pair[0] == m else ds.samples_b
            emb = system.embed(m, samples[:init_batch]).data
            partner = pair[0] if pair[1] == m else pair[1]
            f = build_adaptation(emb, system.specs[partner], F_emb=system.f_emb[m], source=m)
            system.adaptations[m].tokens.data = f.tokens.data
            seen.add(m)

    all_names = set(system.named_params())
    rounds = []
    trained = set()
    for i, pair in enumerate(FLOW_PAIRS):
        new = [m for m in pair if m not in trained]
        trainable = _round_trainable(system, new)
        rounds.append(FlowRound(
            name=f"round{i + 1}_{pair[0]}_{pair[1]}",
            pair=pair,
            trainable=trainable,
            frozen=all_names - trainable,
            dataset=datasets[pair],
            steps=steps,
        ))
        trained.update(pair)
    plan = FlowPlan(rounds)
    validate_plan(plan, system)
    return plan


def validate_round(rnd: FlowRound, system: MultiFlowSystem) -> None:
    all_names = set(system.named_params())
    if rnd.trainable & rnd.frozen:
        raise PlanError(f"{rnd.name}: trainable and frozen sets overlap")
    if rnd.trainable | rnd.frozen != all_names:
        raise PlanError(f"{rnd.name}: round does not cover every parameter")
    if set(rnd.pair) != set(rnd.dataset.pair):
        raise PlanError(f"{rnd.name}: dataset pair {rnd.dataset.pair} != {rnd.pair}")


def validate_plan(plan: FlowPlan, system: MultiFlowSystem) -> None:
    first_round_of = {}
    for idx, rnd in enumerate(plan.rounds):
        validate_round(rnd, system)
        for m in rnd.pair:
            first_round_of.setdefault(m, idx)
    # a diffuser must be trained in the first round that features it;
    # only afterwards may later rounds freeze it
    for m, idx in first_round_of.items():
        rnd = plan.rounds[idx]
        if not _ca_names(system, m) <= rnd.trainable:
            raise PlanError(
                f"{m}: cross-attention weights frozen in its first round {rnd.name}"
            )


# ---------------------------------------------------------------------------
# encoder alignment


def _check_hub_coverage(modalities, pairs) -> None:
    reached = {HUB}
    frontier = True
    while frontier:
        frontier = False
        for a, b in pairs:
            if (a in reached) != (b in reached):
                reached.update((a, b))
                frontier = True
    unreached = set(modalities) - reached
    if unreached:
        raise CoverageError(
            f"modalities {sorted(unreached)} have no paired path to the {HUB} hub"
        )


def align_encoders(system: MultiFlowSystem, datasets: dict, log: list | None = None,
                   steps: int | None = None) -> None:
    """Hub alignment: one contrastive round per available pair, training only
    the encoders new to the shared space (plus the hub in its first round)."""
    cfg = system.cfg
    pairs = [p for p in ALIGN_PAIRS if p in datasets]
    _check_hub_coverage(system.specs.keys(), pairs)
    steps = int(cfg["align_steps"]) if steps is None else int(steps)
    batch = int(cfg["batch"])
    lr = float(cfg["align_lr"])
    vi_weight = float(cfg["vi_weight"])
    vi_text = cfg.get("vi_text", "0") not in ("0", "false", "no", "off")
    lambda1 = float(cfg["lambda1"])

    aligned = {HUB}
    for round_idx, pair in enumerate(pairs):
        ds = datasets[pair]
        new = [m for m in pair if m not in aligned] if round_idx else list(pair)
        trainable = set()
        for m in new:
            trainable |= {k for k in system.named_params() if k.startswith(f"{m}.prompt.")}
        trainable.add("align.log_tau")
        system.set_trainable(trainable)
        params = {k: p for k, p in system.named_params().items() if k in trainable}
        opt = AdamState(groups=[{"params": params, "lr": lr, "weight_decay": 0.0}])
        rng = np.random.default_rng(np.random.SeedSequence([system.seed, 0xA116, round_idx]))

        for step in range(steps):
            idx = rng.integers(0, len(ds), size=batch)
            xa, xb = ds.samples_a[idx], ds.samples_b[idx]
            za = system.embed(ds.pair[0], xa)
            zb = system.embed(ds.pair[1], xb)
            loss = infonce_central(ContrastiveBatch(za, zb, tau=system.tau()))
            for m, x in ((ds.pair[0], xa), (ds.pair[1], xb)):
                if m not in new or vi_weight == 0.0:
                    continue
                if system.specs[m].kind == "image":
                    v1, v2 = augment_image_views(x, rng)
                elif vi_text:
                    v1, v2 = augment_text_views(x, rng)
                else:
                    continue
                vi = vi_barlow(ViewPair(system.embed(m, v1), system.embed(m, v2), lambda1))
                loss = T.add(loss, T.mul(vi, vi_weight))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingAbort(f"alignment loss diverged at step {step}",
                                    {"round": pair, "step": step, "loss": value})
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            if log is not None:
                log.append((step, f"align_{pair[0]}_{pair[1]}", value))
        aligned.update(pair)


# ---------------------------------------------------------------------------
# single-modal pretraining


def pretrain_diffusers(system: MultiFlowSystem, log: list | None = None,
                       steps: int | None = None, base_seed: int = 5000) -> None:
    """Short unconditional pretrain of each modality's diffuser on its own
    renders (the cross-attention stack sees only the null token here)."""
    cfg = system.cfg
    steps = int(cfg["pretrain_steps"]) if steps is None else int(steps)
    batch = int(cfg["batch"])
    n = int(cfg["n_train"])
    sched = system.train_schedule
    for mi, m in enumerate(system.specs):
        scenes = [toybench.Scene.from_seed(s) for s in range(base_seed, base_seed + n)]
        samples = np.stack([toybench.render_modality(sc, m) for sc in scenes])
        z0 = system.encode_latent(m, samples)
        names = {k for k in system.named_params() if k.startswith(f"{m}.diffuser.")}
        system.set_trainable(names)
        params = {k: p for k, p in system.named_params().items() if k in names}
        opt = AdamState(groups=[{"params": params, "lr": float(cfg["pretrain_lr"]),
                                 "weight_decay": 0.0}])
        model = system.diffusers[m]
        rng = np.random.default_rng(np.random.SeedSequence([system.seed, 0x9BE7, mi]))
        for step in range(steps):
            idx = rng.integers(0, n, size=batch)
            t = rng.integers(1, sched.T + 1, size=batch)
            eps = rng.standard_normal((batch,) + tuple(system.specs[m].latent_shape))
            loss = diffusion_loss(model, Tensor(z0[idx]), t, Tensor(eps), schedule=sched)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingAbort(f"pretrain loss diverged for {m} at step {step}",
                                    {"modality": m, "step": step, "loss": value})
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            if log is not None:
                log.append((step, f"pretrain_{m}", value))


# ---------------------------------------------------------------------------
# cross-guided flow rounds


def _dropout_context(ctx: Tensor, null: Tensor, mask: np.ndarray) -> Tensor:
    """Replace the context rows of masked samples with the null token; the
    attention result is identical to attending to a single null token."""
    B, S, d = ctx.shape
    keep = Tensor(np.where(mask, 0.0, 1.0).reshape(B, 1, 1) * np.ones((B, S, d)))
    drop = Tensor(np.where(mask, 1.0, 0.0).reshape(B, 1, 1) * np.ones((B, S, d)))
    null_rep = T.broadcast_to(T.reshape(null, (1, 1, d)), (B, S, d))
    return T.add(T.mul(ctx, keep), T.mul(null_rep, drop))


def _cross_direction(system: MultiFlowSystem, target: str, source: str,
                     z0_t: np.ndarray, z0_s: np.ndarray, t: np.ndarray,
                     rng: np.random.Generator, drop_p: float) -> Tensor:
    """Noise-prediction loss for `target` conditioned on `source` at shared t."""
    sched = system.train_schedule
    batch = z0_t.shape[0]
    eps_s = rng.standard_normal(z0_s.shape)
    z_t_s = forward_diffuse(Tensor(z0_s), t, Tensor(eps_s), sched)
    ctx = encode_context(system.context_encoders[source], z_t_s, system.adaptations[source])
    mask = rng.random(batch) < drop_p
    if mask.any():
        ctx = _dropout_context(ctx, system.diffusers[target].params["cross_attention.null"], mask)
    eps_t = rng.standard_normal(z0_t.shape)
    return diffusion_loss(system.diffusers[target], Tensor(z0_t), t, Tensor(eps_t),
                          context=ctx, schedule=sched)


def run_round(system: MultiFlowSystem, rnd: FlowRound, log: list | None = None,
              round_index: int = 0) -> None:
    """Execute one flow round: optimizer steps on both cross-guided losses
    (plus the optional view-invariance term); frozen parameters stay put."""
    cfg = system.cfg
    validate_round(rnd, system)
    system.set_trainable(rnd.trainable)
    named = system.named_params()
    ca, other = {}, {}
    for k in sorted(rnd.trainable):
        (ca if ".diffuser.cross_attention." in k else other)[k] = named[k]
    opt = AdamState(groups=[
        {"params": ca, "lr": float(cfg["ca_lr"]), "weight_decay": float(cfg["weight_decay"])},
        {"params": other, "lr": float(cfg["ca_lr"]), "weight_decay": 0.0},
    ])

    a, b = rnd.pair
    ds = rnd.dataset
    flip = ds.pair[0] != a
    raw_a = ds.samples_b if flip else ds.samples_a
    raw_b = ds.samples_a if flip else ds.samples_b
    lat_a = system.encode_latent(a, raw_a)
    lat_b = system.encode_latent(b, raw_b)
    batch = int(cfg["batch"])
    drop_p = float(cfg["cfg_dropout"])
    vi_on = cfg.get("vi_on_flows", "1") not in ("0", "false", "no", "off")
    vi_w = float(cfg["vi_flow_weight"])
    lambda1 = float(cfg["lambda1"])
    sched = system.train_schedule
    rng = np.random.default_rng(np.random.SeedSequence([system.seed, 0xF10A, round_index]))

    for step in range(rnd.steps):
        idx = rng.integers(0, len(ds), size=batch)
        t = rng.integers(1, sched.T + 1, size=batch)
        loss_a = _cross_direction(system, a, b, lat_a[idx], lat_b[idx], t, rng, drop_p)
        loss_b = _cross_direction(system, b, a, lat_b[idx], lat_a[idx], t, rng, drop_p)
        total = T.add(loss_a, loss_b)
        parts = {f"cross_{a}": loss_a.item(), f"cross_{b}": loss_b.item()}
        if vi_on and vi_w > 0.0:
            for m, raw in ((a, raw_a), (b, raw_b)):
                if system.specs[m].kind != "image":
                    continue
                v1, v2 = augment_image_views(raw[idx], rng)
                f1 = system.diffusers[m].encoder_features(Tensor(system.encode_latent(m, v1)), 1)
                f2 = system.diffusers[m].encoder_features(Tensor(system.encode_latent(m, v2)), 1)
                vi = vi_barlow(ViewPair(f1, f2, lambda1))
                parts[f"vi_{m}"] = vi.item()
                total = T.add(total, T.mul(vi, vi_w))
        value = total.item()
        if not np.isfinite(value):
            raise TrainingAbort(
                f"{rnd.name}: loss diverged at step {step}",
                {"round": rnd.name, "step": step, "losses": parts},
            )
        T.backward(total)
        opt.step()
        opt.zero_grad()
        if log is not None:
            for name, v in parts.items():
                log.append((step, f"{rnd.name}.{name}", v))
            log.append((step, f"{rnd.name}.total", value))


def run_plan(system: MultiFlowSystem, plan: FlowPlan, log: list | None = None) -> None:
    validate_plan(plan, system)
    for i, rnd in enumerate(plan.rounds):
        run_round(system, rnd, log=log, round_index=i)
