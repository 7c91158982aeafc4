"""
Three detectors, three vantage points
=====================================

Deployed-model defenses see different slices of the supply chain:

* neural cleanse reverse-engineers a minimal trigger per label and flags
  the label whose trigger is anomalously small (needs only the model),
* STRIP blends suspect inputs with clean images and flags predictions
  that survive blending, i.e. low entropy (needs the model at runtime),
* spectral signatures score training representations along the top
  singular direction (needs the training set and the encoder).

This demo backdoors a downstream set (type 1), then points all three
detectors at it.
"""
import numpy as np

from mimbd import (Classifier, EncoderConfig, NCConfig, PlacementSpec,
                   PoisonPlan, PretrainConfig, generate_shapes, make_trigger,
                   neural_cleanse, pretrain, spectral_signature_defense,
                   stamp_all, strip, type1_attack)

TARGET = 0
train = generate_shapes(num_classes=10, per_class=200, image_size=32, seed=0,
                        name="demo-train")
test = generate_shapes(num_classes=10, per_class=25, image_size=32, seed=99,
                       name="demo-test")
encoder, _ = pretrain(PretrainConfig(epochs=12, batch_size=64,
                                     warmup_epochs=2, seed=0), train,
                      EncoderConfig())

plan = PoisonPlan(rate=0.25, target_class=TARGET,
                  trigger=make_trigger("seeded_random", 7, seed=0),
                  placement=PlacementSpec("fixed", coords=(25, 25)),
                  flip_label=True)
res = type1_attack(encoder, train, test, plan,
                   probe_kwargs=dict(epochs=150, lr=0.1, weight_decay=0.0,
                                     lr_decay=0.98, seed=0),
                   poison_seed=0, stamp_seed=0)
victim = Classifier(encoder, res.probe)
print(f"backdoored classifier: TA={res.metrics.ta:.1f} "
      f"ASR={res.metrics.asr:.1f}\n")

# --- neural cleanse ---------------------------------------------------------
# Optimize a mask+pattern per label that flips a probe set to that label;
# the backdoored label needs a suspiciously small mask.
picks = np.concatenate([np.flatnonzero(test.labels == c)[:4]
                        for c in range(10)])
probe_set = test.subset(np.sort(picks))
nc = neural_cleanse(victim, probe_set, NCConfig(steps=100, batch_size=32,
                                                seed=0))
print(f"neural cleanse: anomaly index={nc.anomaly_index:.2f} "
      f"predicted target={nc.predicted_target} flagged={nc.flagged}")
print(f"  per-label mask norms: "
      f"{[f'{n:.0f}' for n in nc.per_label_norms]}")

# --- STRIP -------------------------------------------------------------------
# Stamped inputs keep their (target) prediction under blending -> low
# entropy -> caught. FAR is the fraction of stamped inputs that slip by.
rng = np.random.default_rng(1)
perm = rng.permutation(len(test))
suspects = stamp_all(test.subset(np.sort(perm[:40])), plan.trigger,
                     plan.placement, seed=0)
overlay = test.subset(np.sort(perm[40:60]))
calibration = test.subset(np.sort(perm[60:]))
sr = strip(victim, suspects, overlay, calibration, n_overlays=64, alpha=0.5,
           frr_target=0.02, seed=0)
print(f"\nSTRIP: FAR={sr.far:.1f}% at FRR={sr.frr:.1f}% "
      f"(threshold {sr.threshold:.3f})")

# --- spectral signatures ------------------------------------------------------
# Score each target-class training representation along the top singular
# direction; poisoned samples concentrate at the top.
sp = spectral_signature_defense(res.poisoned_train, encoder, res.poison_mask,
                                target_class=TARGET)
print(f"\nspectral: B-score={sp.b_score:.3f} vs C-score={sp.c_score:.3f} "
      f"flagged={sp.flagged}")
removed = np.asarray(sp.removed_ids)
caught = res.poison_mask[removed].sum()
print(f"  removal list catches {caught} of {int(res.poison_mask.sum())} "
      f"poisoned samples")
