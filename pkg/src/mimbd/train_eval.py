"""Pre-training loop, linear probing on frozen encoders, and metrics.

The probe is a single linear layer over pooled embeddings; the encoder stays
frozen throughout probing (embeddings are computed once up front). evaluate
serves both clean and backdoored models; the caller decides whether the
numbers land in the TA/ASR or CA/ASR_B columns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import ConfigError, NumericsError
from .model import EncoderConfig, MIMModel, mim_loss_backward, mim_loss_forward, sample_mask
from .nn import Param
from .optim import AdamW, cosine_warmup_lr, grad_and_step
from .trigger import PlacementSpec, TriggerPattern, stamp_all

__all__ = [
    "PretrainConfig",
    "pretrain",
    "LinearProbe",
    "train_probe",
    "Metrics",
    "pair_metrics",
    "evaluate",
    "project_2d",
    "predict",
]


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 80
    batch_size: int = 128
    base_lr: float = 1.5e-3
    warmup_epochs: int = 8
    weight_decay: float = 0.05
    mask_ratio: float | None = None   # None: use the model config's ratio
    norm_pix_loss: bool | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must not exceed epochs")


def pretrain(config: PretrainConfig, dataset: Dataset,
             model_config: EncoderConfig) -> tuple[MIMModel, list[float]]:
    """Masked-reconstruction pre-training; returns the model and per-epoch loss."""
    if len(dataset) == 0:
        raise ConfigError("pretrain needs a nonempty dataset")
    mc = model_config
    if config.mask_ratio is not None:
        mc = replace(mc, mask_ratio=config.mask_ratio)
    if config.norm_pix_loss is not None:
        mc = replace(mc, norm_pix_loss=config.norm_pix_loss)
    rng = np.random.default_rng(config.seed)
    model = MIMModel(mc, seed=int(rng.integers(2 ** 31)))
    params = model.params()
    opt = AdamW(params, betas=(0.9, 0.95), weight_decay=config.weight_decay)
    n = len(dataset)
    steps = max(1, math.ceil(n / config.batch_size))
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(steps):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            if idx.size == 0:
                continue
            batch = dataset.images[idx]
            plans = [sample_mask(mc.n_patches, mc.mask_ratio, rng)
                     for _ in range(idx.size)]
            lr = cosine_warmup_lr(config.base_lr, epoch + s / steps,
                                  config.epochs, config.warmup_epochs)

            def loss_and_grad():
                loss, cache = mim_loss_forward(model, batch, plans)
                mim_loss_backward(model, cache)
                return loss

            total += grad_and_step(loss_and_grad, params, opt, lr) * idx.size
        curve.append(total / n)
    return model, curve


class LinearProbe:
    """Single linear layer over embeddings: logits = e @ w + b."""

    def __init__(self, embed_dim: int, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        limit = math.sqrt(6.0 / (embed_dim + num_classes))
        self.w = Param("probe.w", rng.uniform(-limit, limit,
                                              (embed_dim, num_classes)).astype(np.float32))
        self.b = Param("probe.b", np.zeros(num_classes, dtype=np.float32))
        self.num_classes = num_classes

    def params(self):
        return [self.w, self.b]

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        return embeddings @ self.w.value + self.b.value

    def save(self, path: str) -> None:
        np.savez(path, w=self.w.value, b=self.b.value)

    @classmethod
    def load(cls, path: str) -> "LinearProbe":
        with np.load(path) as z:
            w, b = z["w"], z["b"]
        probe = cls(w.shape[0], w.shape[1])
        probe.w.value[...] = w
        probe.b.value[...] = b
        return probe


def _softmax_xent(logits, labels):
    """Mean cross-entropy and dlogits for integer labels."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(p[np.arange(n), labels] + 1e-12).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def train_probe(encoder: MIMModel, trainset: Dataset, epochs: int = 150,
                lr: float = 0.1, weight_decay: float = 0.0, seed: int = 0,
                batch_size: int = 128, lr_decay: float = 0.98,
                embeddings: np.ndarray | None = None) -> LinearProbe:
    """Cross-entropy training of the linear probe on frozen-encoder embeddings.

    Embeddings are computed once (pass them in to reuse across probes); the
    encoder is never touched. Learning rate decays by lr_decay each epoch.
    The defaults are deliberately aggressive for a linear head: a timid probe
    underfits rare poisoned samples and masks every data-poisoning effect.
    """
    if not trainset.labeled:
        raise ConfigError("train_probe needs a labeled dataset")
    if embeddings is None:
        embeddings = encoder.embed(trainset.images)
    labels = trainset.labels
    probe = LinearProbe(embeddings.shape[1], trainset.num_classes, seed=seed)
    opt = AdamW(probe.params(), betas=(0.9, 0.999), weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    n = len(trainset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_lr = lr * (lr_decay ** epoch)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            e, y = embeddings[idx], labels[idx]

            def loss_and_grad():
                logits = probe.logits(e)
                loss, dlogits = _softmax_xent(logits, y)
                probe.w.grad += e.T @ dlogits
                probe.b.grad += dlogits.sum(axis=0)
                return loss

            grad_and_step(loss_and_grad, probe.params(), opt, epoch_lr)
    return probe


def predict(encoder: MIMModel, probe: LinearProbe, images: np.ndarray) -> np.ndarray:
    return probe.logits(encoder.embed(images)).argmax(axis=1)


@dataclass
class Metrics:
    """TA/CA/ASR/ASR_B percentages; None until the paired run fills them in."""

    ta: float | None = None
    ca: float | None = None
    asr: float | None = None
    asr_b: float | None = None
    target_class: int = 0
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ta", "ca", "asr", "asr_b"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ConfigError(f"{name} must lie in [0, 100], got {v}")
        if any(c < 0 for c in self.counts.values() if isinstance(c, int)):
            raise ConfigError("metric counts must be nonnegative")

    def to_dict(self):
        return {"TA": self.ta, "CA": self.ca, "ASR": self.asr, "ASR_B": self.asr_b,
                "target_class": self.target_class, "counts": self.counts}


def pair_metrics(backdoored: Metrics, clean_baseline: Metrics) -> Metrics:
    """Merge a backdoored-model evaluation with its clean-model baseline."""
    if backdoored.target_class != clean_baseline.target_class:
        raise ConfigError("paired metrics must share the target class")
    counts = dict(backdoored.counts)
    counts.update({f"baseline_{k}": v for k, v in clean_baseline.counts.items()})
    return Metrics(ta=backdoored.ta, ca=clean_baseline.ta, asr=backdoored.asr,
                   asr_b=clean_baseline.asr, target_class=backdoored.target_class,
                   counts=counts)


def evaluate(encoder: MIMModel, probe: LinearProbe, clean_test: Dataset,
             trigger: TriggerPattern | None = None,
             placement: PlacementSpec | None = None, target_class: int = 0,
             stamp_seed: int = 0) -> Metrics:
    """Accuracy on the clean test set plus, with a trigger, the rate at which
    the fully stamped test set (target-class images included) lands on the
    target class. Stamping is deterministic in stamp_seed so backdoored and
    clean models can be scored on the identical stamped set.
    """
    if len(clean_test) == 0:
        raise ConfigError("evaluate needs a nonempty test set")
    if not clean_test.labeled:
        raise ConfigError("evaluate needs a labeled test set")
    preds = predict(encoder, probe, clean_test.images)
    correct = int((preds == clean_test.labels).sum())
    n = len(clean_test)
    counts = {"clean_total": n, "clean_correct": correct}
    asr = None
    if trigger is not None:
        if placement is None:
            raise ConfigError("trigger given without a placement")
        stamped = stamp_all(clean_test, trigger, placement, stamp_seed)
        hits = int((predict(encoder, probe, stamped.images) == target_class).sum())
        counts.update({"stamped_total": n, "stamped_target": hits})
        asr = 100.0 * hits / n
    return Metrics(ta=100.0 * correct / n, asr=asr, target_class=target_class,
                   counts=counts)


def project_2d(embeddings: np.ndarray, labels=None, poison_mask=None) -> np.ndarray:
    """Deterministic projection onto the top-2 principal directions.

    labels/poison_mask are accepted for symmetry with the plot writers (the
    coordinates are tagged downstream); they do not affect the projection.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ConfigError("project_2d needs at least 3 points")
    xc = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    if s[0] <= 1e-12:
        raise ConfigError("project_2d needs rank >= 1 (all points identical)")
    comps = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros_like(vt[:1])])
    # fix the sign so repeated runs agree regardless of LAPACK conventions
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return xc @ comps.T
