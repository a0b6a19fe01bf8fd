"""Two-stage optimisation of the velocity field.

0. (base)  the dense network is fitted once, unconditionally, to pool
   crops and then frozen.  It stands in for a pretrained backbone.
1. (cold)  a cold-start adapter learns preset transfer by flow matching on
   paired quadruplets.
2. (rl)    with the cold-start adapter frozen, a post-training adapter is
   tuned by negative-aware fine-tuning on scored rollout groups.
"""

import copy
from dataclasses import dataclass
import json
import logging
import math
from pathlib import Path
import time

import numpy as np
import torch

from .condnet import (COLD_START, POST_TRAINING, ConditioningContext, ContextBatch, VelocityField,
                      attach_adapter, grad)
from .errors import (ConfigurationError, DimensionError, DomainError, MissingAnchorsError, NumericError,
                     StageOrderError)
from .flow import euler_sample, interpolate, target_velocity
from .pool import crop_pair, procedural_pool, quantize
from .reward import ONLINE, RolloutGroup, ScoredSample, score_group
from .rng import derive_seed, numpy_rng, torch_generator

log = logging.getLogger(__name__)

__all__ = [
    "BaseConfig", "ColdConfig", "NftConfig", "PolicySnapshot", "ScoredSample", "TrainingLog",
    "PairedSet", "pretrain_base", "cold_start_step", "train_cold_start", "implicit_policies",
    "nft_loss", "group_nft_loss", "start_post_training", "rl_round", "train_rl",
]


@dataclass
class BaseConfig:
    steps: int = 3000
    pool_size: int = 512
    batch_size: int = 8
    learn_rate: float = 1e-3
    task: str = "copy"  # "copy": target = source crop; "prior": target unrelated to both inputs


@dataclass
class ColdConfig:
    steps: int = 10000
    batch_size: int = 8
    learn_rate: float = 1.0
    rank: int = 4
    alpha: float = 8.0
    augment: bool = True  # random flips / quarter turns, shared by the whole quadruplet
    clip: float | None = 0.3  # global gradient-norm cap
    # chance of an extra flip / quarter turn of the reference alone: its
    # colours still carry the grade, but its layout no longer matches the target
    shuffle_reference: float = 0.5


@dataclass
class NftConfig:
    beta: float = 0.5
    group_online: int = 9
    group_offline: int = 2
    train_steps_per_round: int = 16
    rollout_steps: int = 6
    learn_rate: float = 0.05
    seed: int = 0
    rank: int = 4
    alpha: float = 8.0
    online_fallback: bool = True
    # global gradient-norm cap; sits just above typical online-only norms and
    # bounds the runaway that low-scored anchors can start
    clip: float | None = 0.02

    def validate(self):
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")
        if self.group_online < 0 or self.group_offline < 0:
            raise ConfigurationError("group counts must be non-negative")
        if self.group_online + self.group_offline < 2:
            raise ConfigurationError("a rollout group needs at least 2 members")
        if self.rollout_steps < 1 or self.train_steps_per_round < 1:
            raise ConfigurationError("rollout_steps and train_steps_per_round must be >= 1")
        return self


def _sgd(params, grads, lr, clip=None):
    """p -= lr * g, with g rescaled to global norm ``clip`` when it is larger."""
    scale = 1.0
    if clip is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > clip:
            scale = clip / norm
    with torch.no_grad():
        for name, p in params:
            p.sub_(lr * scale * grads[name])


# --- stage 0: frozen base ------------------------------------------------


def pretrain_base(field: VelocityField, cfg: BaseConfig = BaseConfig(), seed: int = 0,
                  pool=None, progress=None) -> list[float]:
    """Fit every base weight on pool crops, then freeze them.

    The reference is always a crop of an unrelated image, so the base learns
    nothing about transfer.  With ``task="copy"`` the target is the source
    crop itself, giving a source-preserving editor to adapt; with ``"prior"``
    the target is a third unrelated crop and the base is a plain image prior.
    """
    if field.adapter_specs:
        raise StageOrderError("the base must be fitted before any adapter is attached")
    if cfg.task not in ("copy", "prior"):
        raise ConfigurationError(f"unknown base task {cfg.task!r}")
    size = field.cfg.image_size
    if pool is None:
        pool = procedural_pool(cfg.pool_size, derive_seed(seed, "base-pool"), size=2 * size)
    n = len(pool)

    def crop(img, rng):
        h, w = img.shape[:2]
        y, x = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
        return quantize(img[y:y + size, x:x + size])

    triples = []
    for i in range(n):
        rng = numpy_rng(seed, "base-data", i)
        j, k = rng.integers(0, n, 2)
        target = crop(pool[i], rng)
        source = target if cfg.task == "copy" else crop(pool[j], rng)
        triples.append((source, crop(pool[k], rng), target))
    params = list(field.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.learn_rate)
    losses = []
    try:
        for step in range(cfg.steps):
            idx = numpy_rng(seed, "base-batch", step).choice(n, cfg.batch_size, replace=n < cfg.batch_size)
            ctx = ContextBatch.collate([ConditioningContext(triples[i][0], triples[i][1]) for i in idx],
                                       field.cfg.max_prompt, field.dtype)
            x0 = torch.as_tensor(np.stack([triples[i][2] for i in idx])).to(field.dtype)
            loss = _fm_batch_loss(field, ctx, x0, torch_generator(seed, "base-noise", step))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if progress:
                progress(step, losses[-1])
    finally:
        for p in params:
            p.requires_grad_(False)
    return losses


def _fm_batch_loss(field, ctx, x0, gen):
    noise = torch.randn(x0.shape, generator=gen, dtype=torch.float64).to(x0.dtype)
    t = torch.rand(x0.shape[0], generator=gen, dtype=torch.float64)
    xt = interpolate(x0, noise, t.to(x0.dtype))
    v = field(xt, ctx, t)
    diff = v - target_velocity(x0, noise)
    loss = (diff * diff).mean()
    if not bool(torch.isfinite(loss)):
        raise NumericError("non-finite flow-matching loss")
    return loss


# --- stage 1: cold start -------------------------------------------------


@dataclass
class PairedSet:
    """Quadruplets held as stacked arrays, in manifest order."""

    source: np.ndarray
    reference: np.ndarray
    target: np.ndarray
    prompts: list
    ids: list

    @classmethod
    def from_manifest(cls, manifest):
        src, ref, tgt = [], [], []
        for rec in manifest.records:
            s, r, t = manifest.load_images(rec)
            src.append(s), ref.append(r), tgt.append(t)
        return cls(np.stack(src), np.stack(ref), np.stack(tgt),
                   [r.prompt for r in manifest.records], [r.id for r in manifest.records])

    def __len__(self):
        return len(self.ids)

    def context(self, i, k: int = 0, k_ref: int | None = None) -> ConditioningContext:
        return ConditioningContext(dihedral(self.source[i], k), dihedral(self.reference[i], k if k_ref is None else k_ref),
                                   self.prompts[i], self.ids[i])


def dihedral(img: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 flips / quarter turns of an H x W x C image; k=0 is identity."""
    out = np.rot90(img, k % 4, axes=(0, 1))
    return np.ascontiguousarray(out[:, ::-1] if k >= 4 else out)


def _check_cold_stage(field):
    if field.has_adapter(POST_TRAINING):
        raise StageOrderError("cold-start training after a post-training adapter was attached")
    if not field.has_adapter(COLD_START):
        raise StageOrderError("no cold-start adapter attached")
    if any(p.requires_grad for _, p in field.base_parameters()):
        raise StageOrderError("base weights must be frozen during cold-start training")
    if not field.active_parameters():
        raise StageOrderError("cold-start adapter is not active")


def cold_start_step(field: VelocityField, batch, seed: int, step: int, learn_rate: float,
                    clip: float | None = None) -> float:
    """One plain gradient-descent step of flow matching on ``batch``.

    ``batch`` is ``(contexts, targets)``: a list of ConditioningContext and
    an array of target images ``I_t`` (the data end x_0 of the path).
    """
    _check_cold_stage(field)
    contexts, targets = batch
    ctx = ContextBatch.collate(contexts, field.cfg.max_prompt, field.dtype)
    x0 = torch.as_tensor(np.asarray(targets)).to(field.dtype)
    gen = torch_generator(seed, "cold-noise", step)
    loss, grads = grad(field, lambda f: _fm_batch_loss(f, ctx, x0, gen))
    _sgd(field.active_parameters(), grads, learn_rate, clip)
    field.step_counter += 1
    return float(loss)


def train_cold_start(field: VelocityField, data: PairedSet, cfg: ColdConfig = ColdConfig(),
                     seed: int = 0, progress=None) -> list[float]:
    """Attach (if needed) and train the cold-start adapter; returns per-step losses."""
    if not field.has_adapter(COLD_START):
        attach_adapter(field, cfg.rank, cfg.alpha, COLD_START)
    field.set_trainable(COLD_START)
    losses = []
    n = len(data)
    for step in range(cfg.steps):
        rng = numpy_rng(seed, "cold-batch", step)
        idx = rng.choice(n, cfg.batch_size, replace=n < cfg.batch_size)
        ks = rng.integers(0, 8, cfg.batch_size) if cfg.augment else np.zeros(cfg.batch_size, int)
        kr = np.where(rng.random(cfg.batch_size) < cfg.shuffle_reference, rng.integers(0, 8, cfg.batch_size), ks)
        batch = ([data.context(i, k, r) for i, k, r in zip(idx, ks, kr)],
                 np.stack([dihedral(data.target[i], k) for i, k in zip(idx, ks)]))
        losses.append(cold_start_step(field, batch, seed, step, cfg.learn_rate, cfg.clip))
        if progress:
            progress(step, losses[-1])
    field.set_trainable(None)
    return losses


# --- stage 2: negative-aware fine-tuning ---------------------------------


def implicit_policies(v_old, v_theta, beta: float):
    """(v+, v-) = ((1-b) v_old + b v_theta, (1+b) v_old - b v_theta)."""
    if beta < 0:
        raise DomainError("beta must be non-negative")
    if tuple(np.shape(v_old)) != tuple(np.shape(v_theta)):
        raise DimensionError(f"shape mismatch {np.shape(v_old)} vs {np.shape(v_theta)}")
    return (1 - beta) * v_old + beta * v_theta, (1 + beta) * v_old - beta * v_theta


class PolicySnapshot:
    """Frozen copy of the sampling policy at rollout time."""

    def __init__(self, field: VelocityField):
        self.field = copy.deepcopy(field)
        for p in self.field.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def __call__(self, xt, context, t):
        return self.field(xt, context, t)

    @property
    def image_shape(self):
        return self.field.image_shape

    @property
    def dtype(self):
        return self.field.dtype


def group_nft_loss(field, snapshot: PolicySnapshot, images, rewards, context, t, noise, beta: float):
    """Mean over members of r |v+ - v|^2 + (1 - r) |v- - v|^2."""
    x0 = torch.as_tensor(images).to(field.dtype)
    r = torch.as_tensor(np.asarray(rewards, dtype=np.float64)).to(field.dtype)
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if bool(((r < 0) | (r > 1)).any()):
        raise DomainError("rewards must lie in [0, 1]")
    xt = interpolate(x0, noise, t.to(field.dtype))
    v = target_velocity(x0, noise)
    v_old = snapshot(xt, context, t)
    v_pos, v_neg = implicit_policies(v_old, field(xt, context, t), beta)
    pos = ((v_pos - v) ** 2).flatten(1).mean(1)
    neg = ((v_neg - v) ** 2).flatten(1).mean(1)
    per = r * pos + (1 - r) * neg
    if not bool(torch.isfinite(per).all()):
        bad = int(torch.nonzero(~torch.isfinite(per))[0])
        raise NumericError("non-finite NFT loss", sample=bad, t=float(t[bad if t.numel() > 1 else 0]))
    return per.mean()


def nft_loss(field, snapshot: PolicySnapshot, sample: ScoredSample, context, t: float,
             noise_seed: int, beta: float = 0.5):
    """Single-sample negative-aware loss with a seeded fresh noise draw."""
    image = torch.as_tensor(np.asarray(sample.image))
    noise = torch.randn(image.shape, generator=torch_generator(noise_seed, "nft-noise"),
                        dtype=torch.float64).to(field.dtype)
    return group_nft_loss(field, snapshot, image[None], [sample.reward], context,
                          torch.tensor([t], dtype=torch.float64), noise[None], beta)


def start_post_training(field: VelocityField, cfg: NftConfig) -> VelocityField:
    if not field.has_adapter(COLD_START):
        raise StageOrderError("post-training needs a cold-start adapter")
    if not field.has_adapter(POST_TRAINING):
        attach_adapter(field, cfg.rank, cfg.alpha, POST_TRAINING)
    field.set_trainable(POST_TRAINING)
    return field


def _check_rl_stage(field):
    if not field.has_adapter(COLD_START):
        raise StageOrderError("no cold-start adapter present")
    if not field.has_adapter(POST_TRAINING):
        raise StageOrderError("no post-training adapter attached")
    active = {n for n, _ in field.active_parameters()}
    post = {n for n, _ in field.adapter_parameters(POST_TRAINING)}
    if not active or active != post:
        raise StageOrderError("only the post-training adapter may be active in stage 2")


def rl_round(field: VelocityField, cfg: NftConfig, context: ConditioningContext, rater,
             anchors=None, round_index: int = 0):
    """Sample, score and fine-tune on one context; returns (group, group_loss)."""
    _check_rl_stage(field)
    snapshot = PolicySnapshot(field)
    seeds = [derive_seed(cfg.seed, "rollout", round_index, i) for i in range(cfg.group_online)]
    members = []
    if seeds:
        images = euler_sample(snapshot, context, cfg.rollout_steps, seed=seeds)
        members = [ScoredSample(img.numpy().astype(np.float64), ONLINE) for img in images]
    offline = []
    if cfg.group_offline:
        if anchors is None:
            anchors_found = []
            if not cfg.online_fallback:
                raise MissingAnchorsError("no anchor store supplied")
            log.warning("no anchor store; round %d runs online-only", round_index)
        else:
            anchors_found = anchors.get(context.context_id, cfg.group_offline, strict=not cfg.online_fallback)
        offline = anchors_found
    group = score_group(RolloutGroup(context.context_id, members), context.reference, rater, offline)
    images = np.stack([m.image for m in group.members])
    g = len(group.members)
    ctx = ContextBatch.collate([context], field.cfg.max_prompt, field.dtype).repeat(g)
    losses = []
    for k in range(cfg.train_steps_per_round):
        noise, ts = [], []
        for i in range(g):
            gen = torch_generator(cfg.seed, "nft", round_index, k, i)
            noise.append(torch.randn(images.shape[1:], generator=gen, dtype=torch.float64))
            ts.append(torch.rand((), generator=gen, dtype=torch.float64))
        noise = torch.stack(noise).to(field.dtype)
        ts = torch.stack(ts)
        loss, grads = grad(field, lambda f: group_nft_loss(f, snapshot, images, group.rewards, ctx,
                                                           ts, noise, cfg.beta))
        _sgd(field.active_parameters(), grads, cfg.learn_rate, cfg.clip)
        field.step_counter += 1
        losses.append(float(loss))
    return group, float(np.mean(losses))


class TrainingLog:
    """Line-delimited JSON, one record per RL round."""

    FIELDS = ("round", "context_id", "raw_scores", "rewards", "mu", "sigma", "group_loss", "wall_ms")

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path:
            self.path.write_text("", encoding="utf-8")

    def append(self, **rec):
        rec = {k: rec[k] for k in self.FIELDS}
        self.records.append(rec)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")

    @staticmethod
    def read(path):
        return [json.loads(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def train_rl(field: VelocityField, contexts, cfg: NftConfig, rater, rounds: int, anchors=None,
             training_log: TrainingLog | None = None, progress=None):
    """Run ``rounds`` rl_rounds, visiting contexts in a seeded order per epoch."""
    cfg.validate()
    if not contexts:
        raise ConfigurationError("no RL contexts")
    start_post_training(field, cfg)
    training_log = training_log or TrainingLog()
    order = []
    for r in range(rounds):
        if not order:
            order = numpy_rng(cfg.seed, "rl-epoch", r // len(contexts)).permutation(len(contexts)).tolist()
        ctx = contexts[order.pop(0)]
        t0 = time.perf_counter()
        group, loss = rl_round(field, cfg, ctx, rater, anchors, r)
        training_log.append(round=r, context_id=ctx.context_id, raw_scores=group.raw_scores,
                            rewards=group.rewards, mu=group.mu, sigma=group.sigma, group_loss=loss,
                            wall_ms=round((time.perf_counter() - t0) * 1000.0, 3))
        if progress:
            progress(r, group, loss)
    field.set_trainable(None)
    return training_log
