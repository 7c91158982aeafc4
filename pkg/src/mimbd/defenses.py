"""The three detection families: trigger reversal, blend-entropy, spectral.

All defenses are read-only over a frozen Classifier (encoder + linear probe)
or a frozen dataset. Each returns a DetectionReport; scalar sub-formulas
(MAD anomaly index, Shannon entropy, spectral scores) are exposed as
independently testable functions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .model import MIMModel, embed_backward, embed_forward
from .nn import Param, softmax
from .optim import AdamW
from .train_eval import LinearProbe, _softmax_xent

__all__ = [
    "DetectionReport",
    "Classifier",
    "NCConfig",
    "mad_anomaly_index",
    "neural_cleanse",
    "shannon_entropy",
    "strip",
    "spectral_scores",
    "spectral_signature_defense",
]

log = logging.getLogger(__name__)


@dataclass
class DetectionReport:
    method: str
    flagged: bool
    rule: str = ""
    predicted_target: int | None = None
    anomaly_index: float | None = None
    per_label_norms: list | None = None
    far: float | None = None
    frr: float | None = None
    threshold: float | None = None
    b_score: float | None = None
    c_score: float | None = None
    removed_ids: list | None = None
    scores: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("far", "frr"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ConfigError(f"{name} must lie in [0, 100], got {v}")
        if self.flagged and not self.rule:
            raise ConfigError("flagged reports must record the triggering rule")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class Classifier:
    """Frozen encoder plus probe head, scored end to end."""

    encoder: MIMModel
    probe: LinearProbe

    def logits(self, images, batch_size: int = 256) -> np.ndarray:
        return self.probe.logits(self.encoder.embed(images, batch_size))

    def probs(self, images, batch_size: int = 256) -> np.ndarray:
        return softmax(self.logits(images, batch_size), axis=-1)

    def predict(self, images) -> np.ndarray:
        return self.logits(images).argmax(axis=1)


def mad_anomaly_index(values) -> np.ndarray:
    """|v - median| / (1.4826 * MAD) for every value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        raise ConfigError("mad_anomaly_index needs at least 3 values")
    med = np.median(v)
    mad = np.median(np.abs(v - med))
    if mad == 0.0:
        raise ConfigError("degenerate distribution: MAD is zero")
    return np.abs(v - med) / (1.4826 * mad)


def shannon_entropy(probabilities) -> float:
    """Natural-log entropy; 0 * ln 0 counts as 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    if (p < 0).any():
        raise ConfigError("probabilities must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ConfigError(f"probabilities sum to {p.sum()}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    q = np.where(p > 0, p, 1.0)
    return -(p * np.log(q)).sum(axis=-1)


@dataclass(frozen=True)
class NCConfig:
    steps: int = 300
    lr: float = 0.1
    batch_size: int = 32
    lambda_init: float = 1e-3
    success_hi: float = 0.99
    success_lo: float = 0.90
    patience: int = 5
    seed: int = 0


def _reverse_label(classifier: Classifier, images, label: int, cfg: NCConfig,
                   rng) -> tuple[float, bool, float]:
    """Optimize mask+pattern toward one label; returns (norm, reached, success)."""
    h, w, c = images.shape[1:]
    enc, probe = classifier.encoder, classifier.probe
    # tanh-space parameters; mask starts near 0.1, pattern at mid-gray
    wm = Param("nc.mask", np.full((h, w), np.arctanh(2 * 0.1 - 1.0),
                                  dtype=np.float32))
    wp = Param("nc.pattern", np.zeros((h, w, c), dtype=np.float32))
    opt = AdamW([wm, wp], lr=cfg.lr, betas=(0.9, 0.999))
    lam = cfg.lambda_init
    hi_run = 0
    best_norm, reached, last_success = math.inf, False, 0.0
    y = np.full(cfg.batch_size, label)
    n = images.shape[0]
    for _ in range(cfg.steps):
        idx = rng.integers(0, n, cfg.batch_size)
        x = images[idx]
        tm, tp = np.tanh(wm.value), np.tanh(wp.value)
        m = (tm + 1.0) / 2.0
        delta = (tp + 1.0) / 2.0
        xp = (1.0 - m)[None, :, :, None] * x + m[None, :, :, None] * delta
        emb, cache = embed_forward(enc, xp.astype(enc.dtype))
        logits = probe.logits(emb)
        ce, dlogits = _softmax_xent(logits, y)
        success = float((logits.argmax(axis=1) == label).mean())
        norm = float(m.sum())
        demb = (dlogits @ probe.w.value.T).astype(enc.dtype)
        dxp = embed_backward(enc, cache, demb, param_grads=False, want_dx=True)
        dm = (dxp * (delta[None] - x)).sum(axis=(0, 3)) + lam
        ddelta = (dxp * m[None, :, :, None]).sum(axis=0)
        wm.grad[...] = dm * 0.5 * (1.0 - tm * tm)
        wp.grad[...] = ddelta * 0.5 * (1.0 - tp * tp)
        opt.step()
        if success >= cfg.success_lo and norm < best_norm:
            best_norm, reached = norm, True
        if success >= cfg.success_hi:
            hi_run += 1
            if hi_run >= cfg.patience:
                lam *= 1.5
                hi_run = 0
        else:
            hi_run = 0
        if success < cfg.success_lo:
            lam /= 1.5
        last_success = success
    return (best_norm if reached else float((np.tanh(wm.value) + 1).sum() / 2),
            reached, last_success)


def neural_cleanse(classifier: Classifier, probe_set: Dataset,
                   cfg: NCConfig = NCConfig()) -> DetectionReport:
    """Per-label trigger reversal; flags the minimal-norm label when its MAD
    anomaly index exceeds 2."""
    if not probe_set.labeled:
        raise ConfigError("neural_cleanse needs a labeled probe set")
    k = probe_set.num_classes
    present = np.unique(probe_set.labels)
    if len(present) != k:
        raise ConfigError(f"probe set covers {len(present)} of {k} classes")
    rng = np.random.default_rng(cfg.seed)
    norms, reached_flags = [], []
    for label in range(k):
        norm, reached, success = _reverse_label(classifier, probe_set.images,
                                                label, cfg, rng)
        if not reached:
            log.warning("reversal for label %d peaked at %.0f%% success; "
                        "using its norm anyway", label, 100 * success)
        norms.append(norm)
        reached_flags.append(reached)
    indices = mad_anomaly_index(norms)
    target = int(np.argmin(norms))
    idx = float(indices[target])
    flagged = idx > 2.0
    return DetectionReport(
        method="neural_cleanse",
        flagged=flagged,
        rule="anomaly index of minimal-norm label > 2" if flagged else "",
        predicted_target=target,
        anomaly_index=idx,
        per_label_norms=[float(x) for x in norms],
        scores={"anomaly_indices": [float(x) for x in indices]},
        details={"reached_90pct": reached_flags},
    )


def strip(classifier: Classifier, suspect_inputs: Dataset,
          overlay_pool: Dataset, clean_calibration: Dataset,
          n_overlays: int = 64, alpha: float = 0.5, frr_target: float = 0.02,
          seed: int = 0) -> DetectionReport:
    """Blend-entropy detector: low mean entropy under overlays means the
    prediction survives blending, which is the backdoor signature."""
    if n_overlays < 2:
        raise ConfigError("n_overlays must be >= 2")
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    if len(suspect_inputs) == 0 or len(overlay_pool) == 0:
        raise ConfigError("suspect and overlay pools must be nonempty")
    if len(clean_calibration) < 4:
        raise ConfigError("clean_calibration needs at least 4 samples")
    rng = np.random.default_rng(seed)

    def score_set(images):
        scores = np.empty(len(images))
        pool = overlay_pool.images
        for i, x in enumerate(images):
            picks = pool[rng.integers(0, len(pool), n_overlays)]
            blends = alpha * picks + (1.0 - alpha) * x[None]
            scores[i] = _entropy_rows(classifier.probs(blends)).mean()
        return scores

    order = rng.permutation(len(clean_calibration))
    half = len(order) // 2
    calib = clean_calibration.images[order[:half]]
    holdout = clean_calibration.images[order[half:]]
    calib_scores = score_set(calib)
    holdout_scores = score_set(holdout)
    suspect_scores = score_set(suspect_inputs.images)
    threshold = float(np.quantile(calib_scores, frr_target))
    frr = 100.0 * float((holdout_scores < threshold).mean())
    far = 100.0 * float((suspect_scores >= threshold).mean())
    return DetectionReport(
        method="strip",
        flagged=bool((suspect_scores < threshold).any()),
        rule="entropy below calibration quantile",
        far=far,
        frr=frr,
        threshold=threshold,
        scores={
            "suspect": suspect_scores.tolist(),
            "calibration": calib_scores.tolist(),
            "holdout": holdout_scores.tolist(),
        },
        details={"n_overlays": n_overlays, "alpha": alpha,
                 "frr_target": frr_target},
    )


def spectral_scores(representations) -> np.ndarray:
    """Squared projection of centered rows onto the top right-singular vector."""
    x = np.asarray(representations, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError("spectral_scores needs an (n >= 2, d) matrix")
    if not np.isfinite(x).all():
        raise ConfigError("representations must be finite")
    xc = x - x.mean(axis=0)
    if not xc.any():
        return np.zeros(x.shape[0])
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    proj = xc @ vt[0]
    return proj * proj


def spectral_signature_defense(trainset: Dataset, encoder: MIMModel,
                               poison_mask, target_class: int | None = None,
                               multiplier: float = 1.5) -> DetectionReport:
    """Score embeddings of the analyzed group; report mean score of poisoned
    (B) vs clean (C) samples and the removal list of top scores.

    With a target_class and a labeled set, the group is that class (the
    downstream case); otherwise the whole set is one group (the pre-training
    case, where the consumer has no labels).
    """
    poison_mask = np.asarray(poison_mask, dtype=bool)
    if poison_mask.shape != (len(trainset),):
        raise ConfigError("poison_mask must align with the dataset")
    if target_class is not None and trainset.labeled:
        sel = np.flatnonzero(trainset.labels == target_class)
        group = f"class {target_class}"
    else:
        sel = np.arange(len(trainset))
        group = "all samples"
    if sel.size < 2:
        return DetectionReport(method="spectral", flagged=False,
                               details={"note": f"{group} has < 2 samples; skipped"})
    emb = encoder.embed(trainset.images[sel])
    scores = spectral_scores(emb)
    pmask = poison_mask[sel]
    b = float(scores[pmask].mean()) if pmask.any() else None
    c = float(scores[~pmask].mean()) if (~pmask).any() else None
    expected = int(pmask.sum())
    n_remove = min(sel.size, round(multiplier * expected))
    top = np.argsort(scores)[::-1][:n_remove]
    removed = [trainset.ids[int(sel[i])] for i in top]
    removed_poisoned = int(pmask[top].sum())
    flagged = b is not None and c is not None and b > c
    return DetectionReport(
        method="spectral",
        flagged=flagged,
        rule="B-Score > C-Score" if flagged else "",
        b_score=b,
        c_score=c,
        removed_ids=removed,
        scores={"per_sample": scores.tolist()},
        details={"group": group, "expected_poison": expected,
                 "removed_poisoned": removed_poisoned,
                 "recall": (removed_poisoned / expected) if expected else None},
    )
