"""The three supply-chain attacks as end-to-end pipelines.

Type I poisons the labeled downstream set and touches nothing else. Type II
rewrites encoder weights at release time by dragging stamped embeddings onto
reference-image embeddings (decoder untouched, no dataset access). Type III
stamps target-class images of the pre-training set and lets pre-training do
the rest. Every pipeline reports metrics paired with a clean baseline run
under identical seeds.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .model import EncoderConfig, MIMModel, embed_backward, embed_forward, sample_mask
from .optim import SGD, AdamW, grad_and_step
from .train_eval import (Metrics, PretrainConfig, evaluate, pair_metrics,
                         pretrain, train_probe)
from .trigger import (PlacementSpec, PoisonPlan, TriggerPattern,
                      poison_labeled, poison_unlabeled_target_class, stamp_all)

__all__ = [
    "Type2Config",
    "Type1Result",
    "Type3Result",
    "type1_attack",
    "type2_attack",
    "type2_attack_with_mask",
    "type3_attack",
    "clone_model",
]

log = logging.getLogger(__name__)


def clone_model(model: MIMModel) -> MIMModel:
    out = MIMModel(model.config, seed=0, dtype=model.dtype)
    for src, dst in zip(model.params(), out.params()):
        dst.value[...] = src.value
    return out


@dataclass
class Type2Config:
    reference_images: np.ndarray
    trigger: TriggerPattern
    placement: PlacementSpec
    lambda1: float = 1.0
    lambda2: float = 1.0
    epochs: int = 12
    batch_size: int = 64
    lr: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.9
    shadow_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.reference_images = np.asarray(self.reference_images, dtype=np.float32)
        if self.reference_images.ndim != 4 or self.reference_images.shape[0] == 0:
            raise ConfigError("reference_images must be a nonempty (R, H, W, C) stack")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def _unit(a):
    n = np.linalg.norm(a, axis=1, keepdims=True)
    n = np.maximum(n, 1e-12)
    return a / n, n


def _mean_cos_pairwise(a, b):
    """mean_{i,j} cos(a_i, b_j) plus gradients w.r.t. both stacks."""
    ah, na = _unit(a)
    bh, nb = _unit(b)
    c = ah @ bh.T
    n, m = c.shape
    val = float(c.mean())
    da = (bh.sum(axis=0) - c.sum(axis=1, keepdims=True) * ah) / (na * n * m)
    db = (ah.sum(axis=0) - c.sum(axis=0)[:, None] * bh) / (nb * n * m)
    return val, da, db


def _mean_cos_elementwise(a, b):
    """mean_i cos(a_i, b_i) plus gradient w.r.t. a (b treated constant)."""
    ah, na = _unit(a)
    bh, _ = _unit(b)
    c = (ah * bh).sum(axis=1, keepdims=True)
    n = a.shape[0]
    da = (bh - c * ah) / (na * n)
    return float(c.mean()), da


def type1_attack(encoder: MIMModel, downstream_train: Dataset, test: Dataset,
                 plan: PoisonPlan, probe_kwargs: dict | None = None,
                 poison_seed: int = 0, stamp_seed: int = 0,
                 clean_probe=None, clean_embeddings=None):
    """Poison the downstream set, probe on it, evaluate against a clean probe."""
    if not plan.flip_label:
        raise ConfigError("type1_attack requires a label-flipping plan")
    kw = dict(probe_kwargs or {})
    poisoned, mask = poison_labeled(downstream_train, plan, poison_seed)
    probe = train_probe(encoder, poisoned, **kw)
    if clean_probe is None:
        clean_probe = train_probe(encoder, downstream_train,
                                  embeddings=clean_embeddings, **kw)
    m_bd = evaluate(encoder, probe, test, plan.trigger, plan.placement,
                    plan.target_class, stamp_seed)
    m_clean = evaluate(encoder, clean_probe, test, plan.trigger, plan.placement,
                       plan.target_class, stamp_seed)
    return Type1Result(probe, clean_probe, pair_metrics(m_bd, m_clean),
                       mask, poisoned)


@dataclass
class Type1Result:
    probe: object
    clean_probe: object
    metrics: Metrics
    poison_mask: np.ndarray
    poisoned_train: Dataset


def _type2_impl(clean_model: MIMModel, config: Type2Config, shadow: Dataset,
                use_mask: bool) -> MIMModel:
    if len(shadow) == 0:
        raise ConfigError("type2 attack needs a nonempty shadow set")
    bd = clone_model(clean_model)
    rng = np.random.default_rng(config.seed)
    stamped = stamp_all(shadow, config.trigger, config.placement,
                        seed=int(rng.integers(2 ** 31))).images
    refs = config.reference_images
    enc_params = bd.encoder_params()
    if config.optimizer == "sgd":
        opt = SGD(enc_params, lr=config.lr, momentum=config.momentum)
    else:
        opt = AdamW(enc_params, lr=config.lr)
    mc = bd.config

    def fresh_plans(k):
        return [sample_mask(mc.n_patches, mc.mask_ratio, rng) for _ in range(k)]

    def clean_embed(images):
        plans = fresh_plans(len(images)) if use_mask else None
        return embed_forward(clean_model, images, plans)[0]

    if not use_mask:
        emb_clean_shadow = clean_model.embed(shadow.images)
        emb_clean_refs = clean_model.embed(refs)
    n = len(shadow)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        ep_loss, ep_cos = 0.0, 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            xb, xtb = shadow.images[idx], stamped[idx]
            if use_mask:
                target_shadow = clean_embed(xb)
                target_refs = clean_embed(refs)
            else:
                target_shadow = emb_clean_shadow[idx]
                target_refs = emb_clean_refs

            last_cos = [0.0]

            def loss_and_grad():
                pa = fresh_plans(len(idx)) if use_mask else None
                pr = fresh_plans(len(refs)) if use_mask else None
                pc = fresh_plans(len(idx)) if use_mask else None
                ea, ca = embed_forward(bd, xtb, pa)
                er, cr = embed_forward(bd, refs, pr)
                ec, cc = embed_forward(bd, xb, pc)
                v0, da, dr0 = _mean_cos_pairwise(ea, er)
                v1, dr1 = _mean_cos_elementwise(er, target_refs)
                v2, dc = _mean_cos_elementwise(ec, target_shadow)
                loss = -v0 - config.lambda1 * v1 - config.lambda2 * v2
                embed_backward(bd, ca, (-da).astype(bd.dtype))
                embed_backward(bd, cr,
                               (-dr0 - config.lambda1 * dr1).astype(bd.dtype))
                embed_backward(bd, cc, (-config.lambda2 * dc).astype(bd.dtype))
                last_cos[0] = v0
                return loss

            ep_loss += grad_and_step(loss_and_grad, enc_params, opt, config.lr)
            ep_cos = last_cos[0]
        log.info("type2 epoch %d loss %.4f cos(stamped,ref) %.4f",
                 epoch, ep_loss, ep_cos)
    return bd


def type2_attack(clean_model: MIMModel, config: Type2Config,
                 shadow: Dataset) -> MIMModel:
    """Release-phase encoder hijack with masking disabled throughout."""
    return _type2_impl(clean_model, config, shadow, use_mask=False)


def type2_attack_with_mask(clean_model: MIMModel, config: Type2Config,
                           shadow: Dataset) -> MIMModel:
    """The deliberately broken variant: every forward samples a fresh mask and
    pools only visible tokens, on the attacked and the reference side alike."""
    return _type2_impl(clean_model, config, shadow, use_mask=True)


@dataclass
class Type3Result:
    model: MIMModel
    clean_model: MIMModel
    probe: object
    clean_probe: object
    metrics: Metrics
    poison_mask: np.ndarray
    poisoned_pretrain: Dataset


def type3_attack(pretrain_dataset: Dataset, plan: PoisonPlan, variant: str,
                 pre_config: PretrainConfig, model_config: EncoderConfig,
                 downstream_train: Dataset, test: Dataset,
                 probe_kwargs: dict | None = None, poison_seed: int = 0,
                 stamp_seed: int = 0, clean_model: MIMModel | None = None,
                 clean_probe=None) -> Type3Result:
    """Poison target-class pre-training images, pre-train, probe clean, evaluate.

    variant R uses a single randomly placed trigger per image, variant M a
    grid of triggers; the plan's placement must agree. Pass a pre-computed
    clean_model/clean_probe (same seeds) to skip the baseline pre-train.
    """
    if variant not in ("R", "M"):
        raise ConfigError(f"variant must be R or M, got {variant!r}")
    st = plan.placement.strategy
    if variant == "R" and (st != "random" or plan.placement.count != 1):
        raise ConfigError("variant R needs placement random with count 1")
    if variant == "M" and st != "multiple_grid":
        raise ConfigError("variant M needs placement multiple_grid")
    kw = dict(probe_kwargs or {})
    poisoned, mask = poison_unlabeled_target_class(pretrain_dataset, plan,
                                                   poison_seed)
    model, _ = pretrain(pre_config, poisoned, model_config)
    if clean_model is None:
        clean_model, _ = pretrain(pre_config, pretrain_dataset, model_config)
    probe = train_probe(model, downstream_train, **kw)
    if clean_probe is None:
        clean_probe = train_probe(clean_model, downstream_train, **kw)
    m_bd = evaluate(model, probe, test, plan.trigger, plan.placement,
                    plan.target_class, stamp_seed)
    m_clean = evaluate(clean_model, clean_probe, test, plan.trigger,
                       plan.placement, plan.target_class, stamp_seed)
    return Type3Result(model, clean_model, probe, clean_probe,
                       pair_metrics(m_bd, m_clean), mask, poisoned)
