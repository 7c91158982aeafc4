"""Config-driven orchestration: cached pipeline stages, metrics, reports, plots.

A RunConfig is a flat key=value mapping with section prefixes (dataset.,
model., pretrain., probe., trigger., placement., poison.*, attack2.,
defense., eval., masksim.). Expensive stages (data generation, pre-training,
release-phase attacks, detections) are content-addressed in a cache keyed by
the hash of everything that feeds them, so re-running a config is a cache hit
with byte-identical outputs.

The attack taxonomy is enforced up front: each attack type controls exactly
one supply-chain surface — the pre-training set, the released model, or the
downstream set — and any config key touching a surface the attack does not
control is rejected by name.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import Type2Config, type2_attack, type2_attack_with_mask
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, filter_class, generate_shapes, load_dataset, save_dataset
from .defenses import (Classifier, DetectionReport, NCConfig, neural_cleanse,
                       spectral_signature_defense, strip)
from .errors import CapabilityError, ConfigError
from .maskmath import (expected_visible_covered, patches_covered,
                       survival_probability_exact, survival_probability_mc,
                       CoverageSpec)
from .model import EncoderConfig
from .train_eval import (Metrics, PretrainConfig, evaluate, pair_metrics,
                         pretrain, project_2d, train_probe)
from .trigger import (PlacementSpec, PoisonPlan, make_trigger, poison_labeled,
                      poison_unlabeled_target_class, stamp_all,
                      trigger_positions)

log = logging.getLogger(__name__)

PHASES = ("pretraining", "release", "downstream")
ATTACKS = ("none", "type1", "type2", "type2_with_mask", "type3_R", "type3_M")

# Which supply-chain surface each attack type is allowed to touch.
CELL_PRETRAIN = "Pre-training set"
CELL_MODEL = "Model"
CELL_DOWNSTREAM = "Downstream set"
ATTACK_CAPS = {
    "none": (),
    "type1": (CELL_DOWNSTREAM,),
    "type2": (CELL_MODEL,),
    "type2_with_mask": (CELL_MODEL,),
    "type3_R": (CELL_PRETRAIN,),
    "type3_M": (CELL_PRETRAIN,),
}
CAPABILITY_PREFIXES = {
    "poison.pretrain.": CELL_PRETRAIN,
    "attack2.": CELL_MODEL,
    "poison.downstream.": CELL_DOWNSTREAM,
}
ATTACK_PHASE = {
    "none": "downstream",
    "type1": "downstream",
    "type2": "release",
    "type2_with_mask": "release",
    "type3_R": "pretraining",
    "type3_M": "pretraining",
}

DEFAULTS = {
    "dataset.source": "shapes",
    "dataset.name": "shapes10",
    "dataset.num_classes": "10",
    "dataset.train": "5000",
    "dataset.test": "1000",
    "dataset.image_size": "32",
    "dataset.seed": "0",
    "dataset.path": "",
    "model.patch_size": "4",
    "model.embed_dim": "64",
    "model.depth": "4",
    "model.n_heads": "4",
    "model.decoder_dim": "32",
    "model.decoder_depth": "2",
    "model.mask_ratio": "0.75",
    "model.norm_pix_loss": "false",
    "pretrain.epochs": "80",
    "pretrain.batch_size": "128",
    "pretrain.base_lr": "1.5e-3",
    "pretrain.warmup_epochs": "8",
    "pretrain.weight_decay": "0.05",
    "probe.epochs": "150",
    "probe.lr": "0.1",
    "probe.weight_decay": "0.0",
    "probe.lr_decay": "0.98",
    "probe.batch_size": "128",
    "trigger.kind": "white",
    "trigger.size": "7",
    "trigger.seed": "0",
    "placement.strategy": "fixed",
    "placement.count": "1",
    "placement.margin": "0",
    "placement.x": "",
    "placement.y": "",
    "eval.target": "0",
    "defense.list": "",
    "defense.nc.steps": "300",
    "defense.nc.batch_size": "32",
    "defense.nc.lr": "0.1",
    "defense.nc.lambda_init": "1e-3",
    "defense.nc.per_class": "4",
    "defense.strip.n_overlays": "64",
    "defense.strip.alpha": "0.5",
    "defense.strip.frr_target": "0.02",
    "defense.strip.suspect_fraction": "0.04",
    "defense.strip.overlay_fraction": "0.02",
    "defense.strip.calibration": "240",
    "defense.spectral.multiplier": "1.5",
    "masksim.counts": "1,2,3,4,5,6,7,8,9",
    "masksim.trials": "0",
    "masksim.seed": "0",
}

ATTACK_DEFAULTS = {
    "none": {},
    "type1": {"poison.downstream.rate": "0.1", "poison.downstream.target": "0"},
    "type2": {"attack2.epochs": "12", "attack2.batch_size": "64",
              "attack2.lr": "0.05", "attack2.lambda1": "1.0",
              "attack2.lambda2": "1.0", "attack2.optimizer": "sgd",
              "attack2.momentum": "0.9", "attack2.shadow_fraction": "0.1",
              "attack2.n_references": "3", "attack2.target": "0"},
    # Pre-training poisoning defaults to the patterned trigger: constant white
    # squares give the encoder nothing to associate with the target class and
    # the attack collapses, so white stays available only as an ablation.
    "type3_R": {"poison.pretrain.rate": "0.9", "poison.pretrain.target": "0",
                "placement.strategy": "random", "placement.count": "1",
                "trigger.kind": "seeded_random"},
    "type3_M": {"poison.pretrain.rate": "0.9", "poison.pretrain.target": "0",
                "placement.strategy": "multiple_grid", "placement.count": "9",
                "trigger.kind": "seeded_random"},
}
ATTACK_DEFAULTS["type2_with_mask"] = dict(ATTACK_DEFAULTS["type2"])

KNOWN_KEYS = (set(DEFAULTS)
              | {k for d in ATTACK_DEFAULTS.values() for k in d}
              | {"phase", "attack", "seeds", "out"})

SWEEP_KEYS = ("poison.downstream.rate", "poison.pretrain.rate",
              "trigger.size", "placement.count")


def parse_config_text(text: str) -> dict:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text())


def _check_capabilities(attack: str, keys) -> None:
    allowed = ATTACK_CAPS[attack]
    for key in sorted(keys):
        for prefix, cell in CAPABILITY_PREFIXES.items():
            if key.startswith(prefix) and cell not in allowed:
                if allowed:
                    have = " and ".join(f'"{c}"' for c in allowed)
                    detail = f"its only capability is {have}"
                else:
                    detail = "it controls no supply-chain surface"
                raise CapabilityError(
                    f"config key '{key}' needs the \"{cell}\" capability, "
                    f"but attack '{attack}' does not have it ({detail})")


@dataclass(frozen=True)
class RunConfig:
    phase: str
    attack: str
    seeds: tuple
    out: Path
    values: dict

    @classmethod
    def from_mapping(cls, mapping: dict, out=None, seeds=None) -> "RunConfig":
        user = {str(k).strip(): str(v).strip() for k, v in mapping.items()}
        unknown = sorted(set(user) - KNOWN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        attack = user.get("attack", "none")
        if attack not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}, got {attack!r}")
        phase = user.get("phase", ATTACK_PHASE[attack])
        if phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
        if attack != "none" and phase != ATTACK_PHASE[attack]:
            raise ConfigError(
                f"attack '{attack}' runs in the {ATTACK_PHASE[attack]} phase, "
                f"not {phase!r}")
        _check_capabilities(attack, user.keys())
        if seeds is None:
            seeds = [s for s in user.get("seeds", "0").split(",") if s.strip()]
        try:
            seeds = tuple(int(s) for s in seeds)
        except ValueError as e:
            raise ConfigError(f"seeds must be integers: {e}") from None
        if not seeds:
            raise ConfigError("seeds must be nonempty")
        if out is None:
            out = user.get("out", "mimbd_runs")
        values = dict(DEFAULTS)
        values.update(ATTACK_DEFAULTS[attack])
        values.update(user)
        values["phase"] = phase
        values["attack"] = attack
        values.pop("seeds", None)
        values.pop("out", None)
        cfg = cls(phase=phase, attack=attack, seeds=seeds,
                  out=Path(out), values=values)
        cfg._validate_ranges()
        return cfg

    def _validate_ranges(self):
        if self.get_int("dataset.num_classes") < 2:
            raise ConfigError("dataset.num_classes must be >= 2")
        for key in ("poison.downstream.rate", "poison.pretrain.rate"):
            if key in self.values and self.values[key]:
                r = self.get_float(key)
                if not 0.0 < r <= 1.0:
                    raise ConfigError(f"{key} must lie in (0, 1], got {r}")
        if self.get_int("dataset.train") % self.get_int("dataset.num_classes"):
            raise ConfigError("dataset.train must divide evenly across classes")
        if self.get_int("dataset.test") % self.get_int("dataset.num_classes"):
            raise ConfigError("dataset.test must divide evenly across classes")

    # typed accessors -----------------------------------------------------
    def get(self, key: str, default: str | None = None) -> str:
        v = self.values.get(key, default)
        if v is None:
            raise ConfigError(f"missing config key '{key}'")
        return v

    def get_int(self, key, default=None):
        try:
            return int(self.get(key, default))
        except ValueError:
            raise ConfigError(f"{key} must be an integer, "
                              f"got {self.values[key]!r}") from None

    def get_float(self, key, default=None):
        try:
            return float(self.get(key, default))
        except ValueError:
            raise ConfigError(f"{key} must be a number, "
                              f"got {self.values[key]!r}") from None

    def get_bool(self, key, default=None):
        v = self.get(key, default).lower()
        if v in ("true", "1", "yes"):
            return True
        if v in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} must be true/false, got {v!r}")

    def canonical_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def run_id(self, seed: int) -> str:
        return f"{self.config_hash[:8]}-s{seed}"


# --------------------------------------------------------------------------
# content-addressed stage cache


def hash_key(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


class StageCache:
    """Each stage result lives in <root>/<stage>/<hash>/, finished when the
    .complete marker (holding the human-readable key) is present."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def fetch(self, stage: str, key_obj, builder, force: bool = False) -> Path:
        key = hash_key(key_obj)
        d = self.root / stage / key[:20]
        marker = d / ".complete"
        if marker.exists() and not force:
            log.info("cache hit: %s/%s", stage, key[:20])
            return d
        tmp = self.root / stage / f"{key[:20]}.building"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        log.info("building stage %s/%s", stage, key[:20])
        builder(tmp)
        (tmp / ".complete").write_text(
            json.dumps(key_obj, sort_keys=True, default=str, indent=1))
        if d.exists():
            shutil.rmtree(d)
        tmp.rename(d)
        return d


def cache_root(cfg: RunConfig) -> Path:
    env = os.environ.get("MIMBD_CACHE", "").strip()
    return Path(env) if env else cfg.out / "cache"


# --------------------------------------------------------------------------
# config -> domain objects


def _model_config(cfg: RunConfig) -> EncoderConfig:
    return EncoderConfig(
        image_size=cfg.get_int("dataset.image_size"),
        patch_size=cfg.get_int("model.patch_size"),
        embed_dim=cfg.get_int("model.embed_dim"),
        depth=cfg.get_int("model.depth"),
        num_heads=cfg.get_int("model.n_heads"),
        decoder_dim=cfg.get_int("model.decoder_dim"),
        decoder_depth=cfg.get_int("model.decoder_depth"),
        mask_ratio=cfg.get_float("model.mask_ratio"),
        norm_pix_loss=cfg.get_bool("model.norm_pix_loss"),
    )


def _pretrain_config(cfg: RunConfig, seed: int) -> PretrainConfig:
    return PretrainConfig(
        epochs=cfg.get_int("pretrain.epochs"),
        batch_size=cfg.get_int("pretrain.batch_size"),
        base_lr=cfg.get_float("pretrain.base_lr"),
        warmup_epochs=cfg.get_int("pretrain.warmup_epochs"),
        weight_decay=cfg.get_float("pretrain.weight_decay"),
        seed=seed,
    )


def _probe_kwargs(cfg: RunConfig, seed: int) -> dict:
    return dict(epochs=cfg.get_int("probe.epochs"),
                lr=cfg.get_float("probe.lr"),
                weight_decay=cfg.get_float("probe.weight_decay"),
                lr_decay=cfg.get_float("probe.lr_decay"),
                batch_size=cfg.get_int("probe.batch_size"),
                seed=seed)


def _trigger_and_placement(cfg: RunConfig):
    size = cfg.get_int("trigger.size")
    trig = make_trigger(cfg.get("trigger.kind"), size,
                        seed=cfg.get_int("trigger.seed"))
    strategy = cfg.get("placement.strategy")
    img = cfg.get_int("dataset.image_size")
    coords = None
    if strategy == "fixed":
        x = cfg.values.get("placement.x") or str(img - size)
        y = cfg.values.get("placement.y") or str(img - size)
        coords = (int(x), int(y))
    placement = PlacementSpec(strategy=strategy,
                              count=cfg.get_int("placement.count"),
                              coords=coords,
                              margin=cfg.get_int("placement.margin"))
    return trig, placement


def _dataset_key(cfg: RunConfig) -> dict:
    keys = ("dataset.source", "dataset.name", "dataset.num_classes",
            "dataset.train", "dataset.test", "dataset.image_size",
            "dataset.seed", "dataset.path")
    return {k: cfg.values[k] for k in keys}


def _load_data(cfg: RunConfig, cache: StageCache, force: bool):
    """Return (train, test, dataset_key). Generated data is cached on disk."""
    key = _dataset_key(cfg)
    if cfg.get("dataset.source") == "dir":
        base = Path(cfg.get("dataset.path"))
        if not base:
            raise ConfigError("dataset.source=dir needs dataset.path")
        return load_dataset(base / "train"), load_dataset(base / "test"), key
    if cfg.get("dataset.source") != "shapes":
        raise ConfigError(f"unknown dataset.source "
                          f"{cfg.get('dataset.source')!r} (shapes or dir)")
    k = cfg.get_int("dataset.num_classes")
    img = cfg.get_int("dataset.image_size")
    seed = cfg.get_int("dataset.seed")
    name = cfg.get("dataset.name")

    def build(d):
        train = generate_shapes(k, cfg.get_int("dataset.train") // k, img,
                                seed=seed, name=f"{name}-train")
        test = generate_shapes(k, cfg.get_int("dataset.test") // k, img,
                               seed=seed + 7919, name=f"{name}-test")
        save_dataset(train, d / "train")
        save_dataset(test, d / "test")

    d = cache.fetch("dataset", {"stage": "dataset", **key}, build, force)
    return load_dataset(d / "train"), load_dataset(d / "test"), key


def _pretrain_stage(cfg, cache, force, ds_key, seed, poison_desc, build_set):
    """Cached pre-training; build_set() supplies the (possibly poisoned)
    pre-training dataset only when the stage actually has to run."""
    key = {"stage": "pretrain", "data": ds_key, "poison": poison_desc,
           "model": {k: v for k, v in cfg.values.items()
                     if k.startswith("model.")},
           "pre": {k: v for k, v in cfg.values.items()
                   if k.startswith("pretrain.")},
           "seed": seed}

    def build(d):
        model, losses = pretrain(_pretrain_config(cfg, seed), build_set(),
                                 _model_config(cfg))
        save_checkpoint(model, d / "encoder.ckpt")
        with open(d / "loss.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss"])
            w.writerows((i, f"{v:.8f}") for i, v in enumerate(losses))

    d = cache.fetch("pretrain", key, build, force)
    with open(d / "loss.csv") as f:
        rows = list(csv.DictReader(f))
    losses = [float(r["loss"]) for r in rows]
    return load_checkpoint(d / "encoder.ckpt"), losses, key


def _attack2_stage(cfg, cache, force, enc_key, encoder, train, pre_set, seed):
    trig, placement = _trigger_and_placement(cfg)
    target = cfg.get_int("attack2.target")
    n_refs = cfg.get_int("attack2.n_references")
    refs = filter_class(train, target).images[:n_refs]
    if len(refs) < n_refs:
        raise ConfigError(f"not enough class-{target} images for "
                          f"{n_refs} references")
    frac = cfg.get_float("attack2.shadow_fraction")
    n_shadow = max(1, round(frac * len(pre_set)))
    rng = np.random.default_rng(seed)
    shadow = pre_set.subset(np.sort(rng.choice(len(pre_set), n_shadow,
                                               replace=False)))
    t2 = Type2Config(
        reference_images=refs, trigger=trig, placement=placement,
        lambda1=cfg.get_float("attack2.lambda1"),
        lambda2=cfg.get_float("attack2.lambda2"),
        epochs=cfg.get_int("attack2.epochs"),
        batch_size=cfg.get_int("attack2.batch_size"),
        lr=cfg.get_float("attack2.lr"),
        optimizer=cfg.get("attack2.optimizer"),
        momentum=cfg.get_float("attack2.momentum"),
        shadow_fraction=frac, seed=seed)
    key = {"stage": "attack2", "encoder": enc_key, "variant": cfg.attack,
           "attack2": {k: v for k, v in cfg.values.items()
                       if k.startswith(("attack2.", "trigger.", "placement."))},
           "seed": seed}

    def build(d):
        fn = type2_attack_with_mask if cfg.attack == "type2_with_mask" \
            else type2_attack
        save_checkpoint(fn(encoder, t2, shadow), d / "encoder.ckpt")

    d = cache.fetch("attack2", key, build, force)
    return load_checkpoint(d / "encoder.ckpt"), key


# --------------------------------------------------------------------------
# per-seed pipeline


def _run_seed(cfg: RunConfig, seed: int, cache: StageCache, force: bool,
              stage: str = "defend") -> dict:
    """Execute one seed up to `stage` (pretrain < attack < probe < evaluate
    < defend) and return the in-memory context."""
    order = ("pretrain", "attack", "probe", "evaluate", "defend")
    if stage not in order:
        raise ConfigError(f"unknown stage {stage!r}")
    upto = order.index(stage)
    train, test, ds_key = _load_data(cfg, cache, force)
    trig, placement = _trigger_and_placement(cfg)
    target = cfg.get_int("eval.target")
    ctx = {"train": train, "test": test, "trigger": trig,
           "placement": placement, "target": target, "seed": seed}

    # --- pretraining (the clean encoder everybody starts from) ---
    clean_model, clean_losses, enc_key = _pretrain_stage(
        cfg, cache, force, ds_key, seed, None, lambda: train)
    ctx.update(encoder=clean_model, loss_curve=clean_losses, encoder_key=enc_key)

    # --- attack stage ---
    poison_mask = None
    poisoned_pretrain = None
    bd_model, bd_key = clean_model, enc_key
    if cfg.attack in ("type2", "type2_with_mask") and upto >= 1:
        bd_model, bd_key = _attack2_stage(cfg, cache, force, enc_key,
                                          clean_model, train, train, seed)
    elif cfg.attack in ("type3_R", "type3_M") and upto >= 1:
        rate = cfg.get_float("poison.pretrain.rate")
        ptarget = cfg.get_int("poison.pretrain.target")
        plan = PoisonPlan(rate=rate, target_class=ptarget, trigger=trig,
                          placement=placement, flip_label=False)
        poisoned_pretrain, poison_mask = poison_unlabeled_target_class(
            train, plan, seed)
        desc = {"rate": rate, "target": ptarget,
                "trigger": {k: v for k, v in cfg.values.items()
                            if k.startswith(("trigger.", "placement."))},
                "poison_seed": seed}
        bd_model, bd_losses, bd_key = _pretrain_stage(
            cfg, cache, force, ds_key, seed, desc, lambda: poisoned_pretrain)
        ctx["loss_curve"] = bd_losses
    ctx.update(bd_model=bd_model, bd_key=bd_key, poison_mask=poison_mask,
               poisoned_pretrain=poisoned_pretrain)
    if upto < 2:
        return ctx

    # --- probes ---
    kw = _probe_kwargs(cfg, seed)
    probe_train = train
    if cfg.attack == "type1":
        plan = PoisonPlan(rate=cfg.get_float("poison.downstream.rate"),
                          target_class=cfg.get_int("poison.downstream.target"),
                          trigger=trig, placement=placement, flip_label=True)
        probe_train, poison_mask = poison_labeled(train, plan, seed)
        ctx["poison_mask"] = poison_mask
    probe = train_probe(bd_model, probe_train, **kw)
    if cfg.attack == "none":
        clean_probe = probe
    elif cfg.attack == "type1":
        clean_probe = train_probe(bd_model, train, **kw)
    else:
        clean_probe = train_probe(clean_model, train, **kw)
    ctx.update(probe=probe, clean_probe=clean_probe, probe_train=probe_train)
    if upto < 3:
        return ctx

    # --- evaluation ---
    clean_encoder_for_baseline = clean_model if cfg.attack != "type1" \
        else bd_model
    m_bd = evaluate(bd_model, probe, test, trig, placement, target,
                    stamp_seed=seed)
    if cfg.attack == "none":
        metrics = Metrics(ta=None, ca=m_bd.ta, asr=None, asr_b=m_bd.asr,
                          target_class=target, counts=m_bd.counts)
    else:
        m_clean = evaluate(clean_encoder_for_baseline, clean_probe, test,
                           trig, placement, target, stamp_seed=seed)
        metrics = pair_metrics(m_bd, m_clean)
    ctx["metrics"] = metrics
    if upto < 4:
        return ctx

    # --- defenses ---
    wanted = [d for d in cfg.get("defense.list").replace(",", " ").split()
              if d]
    reports = {}
    for name in wanted:
        reports[name] = _run_defense(cfg, name, ctx, cache, force)
    ctx["detections"] = reports
    return ctx


def _nc_probe_set(cfg: RunConfig, test: Dataset) -> Dataset:
    per = cfg.get_int("defense.nc.per_class")
    picks = []
    for c in range(test.num_classes):
        idx = np.flatnonzero(test.labels == c)[:per]
        if idx.size < per:
            raise ConfigError(f"class {c} has fewer than {per} test samples")
        picks.append(idx)
    return test.subset(np.sort(np.concatenate(picks)))


def _run_defense(cfg: RunConfig, name: str, ctx: dict, cache: StageCache,
                 force: bool) -> DetectionReport:
    seed = ctx["seed"]
    classifier = Classifier(ctx["bd_model"], ctx["probe"])
    probe_desc = {"probe": {k: v for k, v in cfg.values.items()
                            if k.startswith(("probe.",
                                             "poison.downstream."))},
                  "seed": seed}
    base_key = {"encoder": ctx["bd_key"], "classifier": probe_desc}
    if name == "neural_cleanse":
        nc = NCConfig(steps=cfg.get_int("defense.nc.steps"),
                      lr=cfg.get_float("defense.nc.lr"),
                      batch_size=cfg.get_int("defense.nc.batch_size"),
                      lambda_init=cfg.get_float("defense.nc.lambda_init"),
                      seed=seed)
        probe_set = _nc_probe_set(cfg, ctx["test"])

        def build(d):
            rep = neural_cleanse(classifier, probe_set, nc)
            (d / "report.json").write_text(
                json.dumps(rep.to_dict(), sort_keys=True, indent=1))

        key = {"stage": "nc", **base_key, "nc": nc.__dict__,
               "per_class": cfg.get_int("defense.nc.per_class")}
        d = cache.fetch("defense", key, build, force)
    elif name == "strip":
        test = ctx["test"]
        rng = np.random.default_rng(seed + 1)
        perm = rng.permutation(len(test))
        n_sus = max(1, round(cfg.get_float("defense.strip.suspect_fraction")
                             * len(test)))
        n_ov = max(2, round(cfg.get_float("defense.strip.overlay_fraction")
                            * len(test)))
        n_cal = cfg.get_int("defense.strip.calibration")
        if n_sus + n_ov + n_cal > len(test):
            raise ConfigError("strip pools exceed the test set")
        suspects = stamp_all(test.subset(np.sort(perm[:n_sus])),
                             ctx["trigger"], ctx["placement"], seed)
        overlay = test.subset(np.sort(perm[n_sus:n_sus + n_ov]))
        calib = test.subset(np.sort(perm[n_sus + n_ov:n_sus + n_ov + n_cal]))

        def build(d):
            rep = strip(classifier, suspects, overlay, calib,
                        n_overlays=cfg.get_int("defense.strip.n_overlays"),
                        alpha=cfg.get_float("defense.strip.alpha"),
                        frr_target=cfg.get_float("defense.strip.frr_target"),
                        seed=seed)
            (d / "report.json").write_text(
                json.dumps(rep.to_dict(), sort_keys=True, indent=1))

        key = {"stage": "strip", **base_key,
               "strip": {k: v for k, v in cfg.values.items()
                         if k.startswith("defense.strip.")},
               "pools": [n_sus, n_ov, n_cal], "seed": seed}
        d = cache.fetch("defense", key, build, force)
    elif name == "spectral":
        if cfg.attack in ("type2", "type2_with_mask"):
            return DetectionReport(
                method="spectral", flagged=False,
                details={"note": "not applicable: the released-model attack "
                                 "poisons no training set"})
        if cfg.attack in ("type3_R", "type3_M"):
            trainset, mask = ctx["poisoned_pretrain"], ctx["poison_mask"]
            tcls = cfg.get_int("poison.pretrain.target")
        elif cfg.attack == "type1":
            trainset, mask = ctx["probe_train"], ctx["poison_mask"]
            tcls = cfg.get_int("poison.downstream.target")
        else:
            trainset = ctx["train"]
            mask = np.zeros(len(trainset), bool)
            tcls = ctx["target"]

        def build(d):
            rep = spectral_signature_defense(
                trainset, ctx["bd_model"], mask, target_class=tcls,
                multiplier=cfg.get_float("defense.spectral.multiplier"))
            (d / "report.json").write_text(
                json.dumps(rep.to_dict(), sort_keys=True, indent=1))

        key = {"stage": "spectral", **base_key, "target": tcls,
               "mult": cfg.get("defense.spectral.multiplier"), "seed": seed}
        d = cache.fetch("defense", key, build, force)
    else:
        raise ConfigError(f"unknown defense {name!r} "
                          f"(neural_cleanse, strip, spectral)")
    data = json.loads((d / "report.json").read_text())
    return DetectionReport(**data)


# --------------------------------------------------------------------------
# run records and artifact writing


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _write_projection(run_dir: Path, ctx: dict) -> None:
    test = ctx["test"]
    n = min(len(test), 400)
    emb = ctx["bd_model"].embed(test.images[:n])
    pts = project_2d(emb, labels=test.labels[:n])
    rows = [(f"{x:.6f}", f"{y:.6f}", int(l))
            for (x, y), l in zip(pts, test.labels[:n])]
    _write_csv(run_dir / "projection.csv", ["x", "y", "label"], rows)
    scatter_svg(run_dir / "projection.svg", pts, test.labels[:n],
                title="embedding projection")


def _metrics_record(cfg: RunConfig, seed: int, metrics: Metrics) -> dict:
    m = metrics.to_dict()
    return {"run_id": cfg.run_id(seed), "phase": cfg.phase,
            "attack": cfg.attack, "dataset": cfg.get("dataset.name"),
            "seed": seed, "TA": m["TA"], "CA": m["CA"], "ASR": m["ASR"],
            "ASR_B": m["ASR_B"], "config_hash": cfg.config_hash}


def run(cfg: RunConfig, force: bool = False, stage: str = "defend") -> dict:
    """Execute every seed of a config, write artifacts under cfg.out, and
    return the run record (also saved as record.json)."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "config.resolved.txt").write_text(cfg.canonical_text())
    cache = StageCache(cache_root(cfg))
    records, lines = [], []
    for seed in cfg.seeds:
        ctx = _run_seed(cfg, seed, cache, force, stage)
        run_dir = cfg.out / "runs" / cfg.run_id(seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(run_dir / "loss_curve.csv", ["epoch", "loss"],
                   [(i, f"{v:.8f}") for i, v in enumerate(ctx["loss_curve"])])
        entry = {"run_id": cfg.run_id(seed), "seed": seed,
                 "encoder_key": hash_key(ctx["encoder_key"])[:20],
                 "attack_key": hash_key(ctx["bd_key"])[:20]}
        if "metrics" in ctx:
            rec = _metrics_record(cfg, seed, ctx["metrics"])
            rec["counts"] = ctx["metrics"].counts
            (run_dir / "metrics.json").write_text(
                json.dumps(rec, sort_keys=True, indent=1))
            lines.append(json.dumps(
                {k: rec[k] for k in ("run_id", "phase", "attack", "dataset",
                                     "seed", "TA", "CA", "ASR", "ASR_B",
                                     "config_hash")}, sort_keys=True))
            entry["metrics"] = rec
            _write_projection(run_dir, ctx)
        for name, rep in ctx.get("detections", {}).items():
            body = {"run_id": cfg.run_id(seed), "seed": seed,
                    "config_hash": cfg.config_hash, "report": rep.to_dict()}
            (run_dir / f"detection_{name}.json").write_text(
                json.dumps(body, sort_keys=True, indent=1))
            if name == "strip" and rep.scores:
                rows = [(grp, f"{v:.8f}") for grp in
                        ("calibration", "holdout", "suspect")
                        for v in rep.scores.get(grp, [])]
                _write_csv(run_dir / "strip_entropy.csv",
                           ["set", "entropy"], rows)
                histogram_svg(run_dir / "strip_entropy.svg",
                              {g: rep.scores.get(g, []) for g in
                               ("holdout", "suspect")},
                              xlabel="mean blend entropy",
                              title="blend-entropy distributions")
            entry.setdefault("detections", {})[name] = body["report"]
        records.append(entry)
    if lines:
        (cfg.out / "metrics.jsonl").write_text("".join(l + "\n" for l in lines))
    record = {"config_hash": cfg.config_hash, "phase": cfg.phase,
              "attack": cfg.attack, "dataset": cfg.get("dataset.name"),
              "seeds": list(cfg.seeds), "config": cfg.values,
              "runs": records}
    (cfg.out / "record.json").write_text(
        json.dumps(record, sort_keys=True, indent=1))
    return record


# --------------------------------------------------------------------------
# reporting


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _fmt(mean, std):
    if mean is None:
        return "-"
    if std is None or std != std:
        return f"{mean:.2f}"
    return f"{mean:.2f}±{std:.2f}"


def report(records: list, out: Path) -> str:
    """Aggregate run records into per-attack tables (mean±std over seeds) and
    sweep curves; records of different attack types are never pooled."""
    if not records:
        raise ConfigError("report needs at least one run record")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    groups = {}
    for rec in records:
        groups.setdefault(rec["attack"], []).append(rec)
    lines, csv_rows = [], []
    header = ("attack", "dataset", "config", "seeds",
              "TA", "CA", "ASR", "ASR-B")
    widths = (16, 12, 10, 7, 14, 14, 14, 14)
    fmt_row = "".join(f"{{:<{w}}}" for w in widths)
    lines.append(fmt_row.format(*header))
    lines.append("-" * sum(widths))
    for attack in sorted(groups):
        group = groups[attack]
        phases = {r["phase"] for r in group}
        if len(phases) > 1:
            raise ConfigError(
                f"cannot tabulate attack '{attack}' across mixed phases "
                f"{sorted(phases)}; report them separately")
        for rec in group:
            per_metric = {}
            for name in ("TA", "CA", "ASR", "ASR_B"):
                vals = [r["metrics"][name] for r in rec["runs"]
                        if "metrics" in r]
                per_metric[name] = _mean_std(vals)
            lines.append(fmt_row.format(
                attack, rec["dataset"], rec["config_hash"][:8],
                str(len(rec["runs"])),
                *(_fmt(*per_metric[n]) for n in ("TA", "CA", "ASR", "ASR_B"))))
            row = [attack, rec["dataset"], rec["config_hash"], len(rec["runs"])]
            for name in ("TA", "CA", "ASR", "ASR_B"):
                m, s = per_metric[name]
                row += ["" if m is None else f"{m:.4f}",
                        "" if s is None else f"{s:.4f}"]
            csv_rows.append(row)
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    _write_csv(out / "report.csv",
               ["attack", "dataset", "config_hash", "n_seeds",
                "ta_mean", "ta_std", "ca_mean", "ca_std",
                "asr_mean", "asr_std", "asr_b_mean", "asr_b_std"], csv_rows)
    _write_sweep_curves(groups, out)
    return text


def _write_sweep_curves(groups: dict, out: Path) -> None:
    plots = out / "plots"
    for attack, group in groups.items():
        if len(group) < 2:
            continue
        for key in SWEEP_KEYS:
            try:
                xs = [float(rec["config"].get(key)) for rec in group]
            except (TypeError, ValueError):
                continue
            if len(set(xs)) < 2:
                continue
            pts = []
            for x, rec in sorted(zip(xs, group), key=lambda p: p[0]):
                vals = [r["metrics"]["ASR"] for r in rec["runs"]
                        if "metrics" in r and r["metrics"]["ASR"] is not None]
                m, s = _mean_std(vals)
                if m is not None:
                    pts.append((x, m, 0.0 if s is None else s))
            if len(pts) < 2:
                continue
            plots.mkdir(parents=True, exist_ok=True)
            slug = key.replace(".", "_")
            _write_csv(plots / f"{attack}_asr_vs_{slug}.csv",
                       ["x", "asr_mean", "asr_std"],
                       [(f"{x:g}", f"{m:.4f}", f"{s:.4f}") for x, m, s in pts])
            line_plot_svg(plots / f"{attack}_asr_vs_{slug}.svg",
                          [p[0] for p in pts], {attack: [p[1] for p in pts]},
                          xlabel=key, ylabel="ASR (%)",
                          title=f"ASR vs {key}")


# --------------------------------------------------------------------------
# mask-survival simulation


def masksim(cfg: RunConfig, out: Path | None = None) -> list[dict]:
    """Exact (and optionally Monte-Carlo) trigger-survival numbers for each
    trigger count in masksim.counts; writes masksim.csv + .svg."""
    out = Path(out) if out is not None else cfg.out
    out.mkdir(parents=True, exist_ok=True)
    img = cfg.get_int("dataset.image_size")
    patch = cfg.get_int("model.patch_size")
    size = cfg.get_int("trigger.size")
    ratio = cfg.get_float("model.mask_ratio")
    grid = img // patch
    n = grid * grid
    v = int(round(n * (1.0 - ratio)))
    m = n - v
    seed = cfg.get_int("masksim.seed")
    trials = cfg.get_int("masksim.trials")
    counts = [int(c) for c in cfg.get("masksim.counts").split(",") if c.strip()]
    rows = []
    for c in sorted(set(counts)):
        placement = PlacementSpec(strategy="multiple_grid", count=c)
        positions = trigger_positions(placement, size, (img, img),
                                      np.random.default_rng(seed))
        covered = tuple(patches_covered(img, patch, size, pos)
                        for pos in positions)
        spec = CoverageSpec(n_patches=n, n_masked=m, covered=covered)
        k = spec.k
        row = {"count": c, "patches_covered": k,
               "survival": survival_probability_exact(n, m, k),
               "expected_visible": expected_visible_covered(n, m, k)}
        if trials > 0:
            est, err = survival_probability_mc(spec, trials, seed)
            row.update(mc_estimate=est, mc_stderr=err)
        rows.append(row)
    headers = list(rows[0].keys())
    _write_csv(out / "masksim.csv", headers,
               [[(f"{r[h]:.10f}" if isinstance(r[h], float) else r[h])
                 for h in headers] for r in rows])
    line_plot_svg(out / "masksim.svg", [r["count"] for r in rows],
                  {"exact": [r["survival"] for r in rows]},
                  xlabel="trigger count", ylabel="survival probability",
                  title=f"trigger survival under {ratio:.0%} masking")
    return rows


# --------------------------------------------------------------------------
# plotting (SVG via matplotlib's Agg backend; every plot has a CSV twin)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def line_plot_svg(path, xs, ys_by_label: dict, xlabel="", ylabel="", title=""):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for label, ys in ys_by_label.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(ys_by_label) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def histogram_svg(path, values_by_label: dict, bins=30, xlabel="", title=""):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for label, vals in values_by_label.items():
        if len(vals):
            ax.hist(vals, bins=bins, alpha=0.6, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def scatter_svg(path, points, labels, title=""):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.2, 4))
    labels = np.asarray(labels)
    for c in np.unique(labels):
        sel = labels == c
        ax.scatter(points[sel, 0], points[sel, 1], s=8, label=str(c))
    ax.set_title(title)
    ax.legend(fontsize=6, markerscale=0.8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
