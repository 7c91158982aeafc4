"""Masked-image-modeling model: patch embed, random masking, encoder, decoder.

Positional embeddings are added to all patch tokens before any masking, the
encoder only ever sees the visible tokens, and the decoder rebuilds the full
sequence with a learned mask token. The reconstruction loss averages squared
error over masked patches only.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError
from .nn import Block, LayerNorm, Linear, Param
from . import nn

__all__ = [
    "EncoderConfig",
    "MaskPlan",
    "sample_mask",
    "patchify",
    "unpatchify",
    "MIMModel",
    "mim_loss_forward",
    "mim_loss_backward",
    "embed_forward",
    "embed_backward",
]


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    mask_ratio: float = 0.75
    norm_pix_loss: bool = False
    mlp_ratio: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError("patch_size must divide image_size")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ConfigError("decoder_dim must be divisible by decoder_heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def n_visible(self) -> int:
        return round(self.n_patches * (1.0 - self.mask_ratio))


@dataclass(frozen=True)
class MaskPlan:
    """A permutation of patch ids; the first n_visible entries stay visible.

    n_visible may equal n (nothing masked) for mask-free encoding, but the
    reconstruction loss refuses such a plan.
    """

    perm: np.ndarray
    n_visible: int

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        n = perm.shape[0]
        if sorted(perm.tolist()) != list(range(n)):
            raise ConfigError("perm must be a permutation of [0, n_patches)")
        if not 0 < self.n_visible <= n:
            raise ConfigError(f"n_visible must lie in (0, {n}], got {self.n_visible}")
        object.__setattr__(self, "perm", perm)

    @property
    def visible(self) -> np.ndarray:
        return self.perm[: self.n_visible]

    @property
    def masked(self) -> np.ndarray:
        return self.perm[self.n_visible:]


def sample_mask(n_patches: int, mask_ratio: float, rng) -> MaskPlan:
    """Uniform random mask keeping round(n * (1 - ratio)) patches visible."""
    v = round(n_patches * (1.0 - mask_ratio))
    if v < 1:
        raise ConfigError(f"mask_ratio {mask_ratio} leaves no visible patches")
    return MaskPlan(rng.permutation(n_patches), v)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, P*P*C); patch i is the row-major flattening of
    the i-th P x P block, patches ordered row-major over the grid."""
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigError("patch size must divide image dimensions")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, -1)


def unpatchify(patches: np.ndarray, patch_size: int, image_size: int,
               channels: int = 3) -> np.ndarray:
    b, n, d = patches.shape
    g = image_size // patch_size
    if n != g * g or d != patch_size * patch_size * channels:
        raise ConfigError("patch array shape does not match image geometry")
    x = patches.reshape(b, g, g, patch_size, patch_size, channels)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, image_size, image_size, channels)


def _perm_matrix(plans, n, batch) -> np.ndarray:
    """Normalize plans (one shared or one per image) to a (B, N) perm matrix."""
    if isinstance(plans, MaskPlan):
        return np.broadcast_to(plans.perm, (batch, n))
    if len(plans) != batch:
        raise ConfigError(f"got {len(plans)} mask plans for batch of {batch}")
    return np.stack([p.perm for p in plans])


class MIMModel:
    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c = config
        self.patch_embed = Linear(rng, c.patch_dim, c.embed_dim, "enc.patch_embed", dtype)
        self.pos_embed = Param(
            "enc.pos_embed",
            (rng.standard_normal((c.n_patches, c.embed_dim)) * 0.02).astype(dtype))
        self.blocks = [Block(rng, c.embed_dim, c.num_heads, f"enc.block{i}",
                             c.mlp_ratio, dtype) for i in range(c.depth)]
        self.norm = LayerNorm(c.embed_dim, "enc.norm", dtype)
        self.decoder_embed = Linear(rng, c.embed_dim, c.decoder_dim, "dec.embed", dtype)
        self.mask_token = Param(
            "dec.mask_token",
            (rng.standard_normal(c.decoder_dim) * 0.02).astype(dtype))
        self.decoder_pos = Param(
            "dec.pos_embed",
            (rng.standard_normal((c.n_patches, c.decoder_dim)) * 0.02).astype(dtype))
        self.decoder_blocks = [Block(rng, c.decoder_dim, c.decoder_heads,
                                     f"dec.block{i}", c.mlp_ratio, dtype)
                               for i in range(c.decoder_depth)]
        self.decoder_norm = LayerNorm(c.decoder_dim, "dec.norm", dtype)
        self.head = Linear(rng, c.decoder_dim, c.patch_dim, "dec.head", dtype)

    def encoder_params(self) -> list[Param]:
        out = self.patch_embed.params() + [self.pos_embed]
        for blk in self.blocks:
            out += blk.params()
        return out + self.norm.params()

    def decoder_params(self) -> list[Param]:
        out = self.decoder_embed.params() + [self.mask_token, self.decoder_pos]
        for blk in self.decoder_blocks:
            out += blk.params()
        return out + self.decoder_norm.params() + self.head.params()

    def params(self) -> list[Param]:
        return self.encoder_params() + self.decoder_params()

    # -- encoder ----------------------------------------------------------

    def encode_forward(self, images, plans=None):
        """Tokens after the final encoder norm; visible-only when plans given.

        Returns (tokens, cache). Token order with a plan is perm order (the
        i-th output token is patch plans.perm[i]).
        """
        c = self.config
        patches = patchify(np.asarray(images, dtype=self.dtype), c.patch_size)
        b = patches.shape[0]
        tok, c_embed = self.patch_embed.forward(patches)
        tok = tok + self.pos_embed.value
        perms = None
        if plans is not None:
            perms = _perm_matrix(plans, c.n_patches, b)
            v = (plans if isinstance(plans, MaskPlan) else plans[0]).n_visible
            idx = perms[:, :v]
            tok = np.take_along_axis(tok, idx[:, :, None], axis=1)
        caches = []
        for blk in self.blocks:
            tok, cb = blk.forward(tok)
            caches.append(cb)
        out, c_norm = self.norm.forward(tok)
        return out, (c_embed, perms, caches, c_norm, b)

    def encode_backward(self, cache, dout, param_grads=True, want_dx=False):
        c_embed, perms, caches, c_norm, b = cache
        c = self.config
        dtok = self.norm.backward(c_norm, dout, param_grads)
        for blk, cb in zip(reversed(self.blocks), reversed(caches)):
            dtok = blk.backward(cb, dtok, param_grads)
        if perms is not None:
            v = dtok.shape[1]
            full = np.zeros((b, c.n_patches, c.embed_dim), dtype=dtok.dtype)
            np.put_along_axis(full, perms[:, :v, None], dtok, axis=1)
            dtok = full
        if param_grads:
            self.pos_embed.grad += dtok.sum(axis=0)
        dpatches = self.patch_embed.backward(c_embed, dtok, param_grads)
        if not want_dx:
            return None
        return unpatchify(dpatches, c.patch_size, c.image_size, c.channels)

    # -- pooled embedding ---------------------------------------------------

    def embed(self, images, batch_size: int = 256) -> np.ndarray:
        """Mean over all patch tokens (no masking), then the final norm."""
        outs = []
        for i in range(0, len(images), batch_size):
            e, _ = embed_forward(self, images[i:i + batch_size])
            outs.append(e)
        return np.concatenate(outs, axis=0)

    # -- decoder ------------------------------------------------------------

    def decode_forward(self, latents, plans):
        """Project latents, scatter into the full sequence with mask tokens,
        add decoder positions, run decoder blocks, predict patch pixels."""
        c = self.config
        b, v, _ = latents.shape
        lat, c_embed = self.decoder_embed.forward(latents)
        perms = _perm_matrix(plans, c.n_patches, b)
        idx = perms[:, :v]
        full = np.tile(self.mask_token.value, (b, c.n_patches, 1))
        np.put_along_axis(full, idx[:, :, None], lat, axis=1)
        full = full + self.decoder_pos.value
        caches = []
        for blk in self.decoder_blocks:
            full, cb = blk.forward(full)
            caches.append(cb)
        normed, c_norm = self.decoder_norm.forward(full)
        pred, c_head = self.head.forward(normed)
        return pred, (c_embed, idx, caches, c_norm, c_head, b, v)

    def decode_backward(self, cache, dpred, param_grads=True):
        c_embed, idx, caches, c_norm, c_head, b, v = cache
        c = self.config
        dnormed = self.head.backward(c_head, dpred, param_grads)
        dfull = self.decoder_norm.backward(c_norm, dnormed, param_grads)
        for blk, cb in zip(reversed(self.decoder_blocks), reversed(caches)):
            dfull = blk.backward(cb, dfull, param_grads)
        if param_grads:
            self.decoder_pos.grad += dfull.sum(axis=0)
        dlat = np.take_along_axis(dfull, idx[:, :, None], axis=1)
        if param_grads:
            rest = dfull.copy()
            np.put_along_axis(rest, idx[:, :, None], 0.0, axis=1)
            self.mask_token.grad += rest.sum(axis=(0, 1))
        return self.decoder_embed.backward(c_embed, dlat, param_grads)


def reconstruction_loss(pred, images, plans, patch_size, norm_pix_loss):
    """MSE over masked patches only; returns (loss, dpred).

    With norm_pix_loss the target patch is standardized to zero mean and unit
    variance (eps 1e-6) before comparison. Raises when nothing is masked.
    """
    target = patchify(np.asarray(images, dtype=pred.dtype), patch_size)
    b, n, d = target.shape
    if plans is None:
        raise ConfigError("reconstruction loss needs a mask plan; nothing is masked")
    perms = _perm_matrix(plans, n, b)
    v = (plans if isinstance(plans, MaskPlan) else plans[0]).n_visible
    if v >= n:
        raise ConfigError("mask plan leaves no masked patches")
    if norm_pix_loss:
        mean = target.mean(axis=-1, keepdims=True)
        var = target.var(axis=-1, keepdims=True)
        target = (target - mean) / np.sqrt(var + 1e-6)
    mask = np.zeros((b, n), dtype=pred.dtype)
    np.put_along_axis(mask, perms[:, v:], 1.0, axis=1)
    diff = pred - target
    per_patch = (diff * diff).mean(axis=-1)
    denom = mask.sum()
    loss = float((per_patch * mask).sum() / denom)
    dpred = diff * (2.0 / d) * (mask[:, :, None] / denom)
    return loss, dpred


def mim_loss_forward(model: MIMModel, images, plans):
    """Full masked-reconstruction forward; returns (loss, cache)."""
    latents, c_enc = model.encode_forward(images, plans)
    pred, c_dec = model.decode_forward(latents, plans)
    loss, dpred = reconstruction_loss(pred, images, plans,
                                      model.config.patch_size,
                                      model.config.norm_pix_loss)
    return loss, (c_enc, c_dec, dpred)


def mim_loss_backward(model: MIMModel, cache) -> None:
    c_enc, c_dec, dpred = cache
    dlat = model.decode_backward(c_dec, dpred)
    model.encode_backward(c_enc, dlat)


def embed_forward(model: MIMModel, images, plans=None):
    """Pooled embedding: mean over (visible) pre-norm tokens, then final norm.

    The final encoder norm is applied to the pooled vector rather than per
    token, matching the global-pool probing convention.
    """
    c = model.config
    patches = patchify(np.asarray(images, dtype=model.dtype), c.patch_size)
    b = patches.shape[0]
    tok, c_embed = model.patch_embed.forward(patches)
    tok = tok + model.pos_embed.value
    perms = None
    if plans is not None:
        perms = _perm_matrix(plans, c.n_patches, b)
        v = (plans if isinstance(plans, MaskPlan) else plans[0]).n_visible
        tok = np.take_along_axis(tok, perms[:, :v, None], axis=1)
    caches = []
    for blk in model.blocks:
        tok, cb = blk.forward(tok)
        caches.append(cb)
    pooled = tok.mean(axis=1)
    emb, c_norm = model.norm.forward(pooled)
    return emb, (c_embed, perms, caches, c_norm, b, tok.shape[1])


def embed_backward(model: MIMModel, cache, demb, param_grads=True,
                   want_dx=False):
    c_embed, perms, caches, c_norm, b, t = cache
    c = model.config
    dpooled = model.norm.backward(c_norm, demb, param_grads)
    dtok = np.broadcast_to(dpooled[:, None, :] / t,
                           (b, t, c.embed_dim)).astype(demb.dtype)
    for blk, cb in zip(reversed(model.blocks), reversed(caches)):
        dtok = blk.backward(cb, dtok, param_grads)
    if perms is not None:
        v = dtok.shape[1]
        full = np.zeros((b, c.n_patches, c.embed_dim), dtype=dtok.dtype)
        np.put_along_axis(full, perms[:, :v, None], dtok, axis=1)
        dtok = full
    if param_grads:
        model.pos_embed.grad += dtok.sum(axis=0)
    dpatches = model.patch_embed.backward(c_embed, dtok, param_grads)
    if not want_dx:
        return None
    return unpatchify(dpatches, c.patch_size, c.image_size, c.channels)
