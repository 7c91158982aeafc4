"""
Type 1: poisoning the labeled downstream set
============================================

The attacker here never touches pre-training or the encoder — they only
stamp a trigger onto a fraction of the downstream training images and
relabel those images to the target class. The frozen encoder faithfully
embeds the trigger, and the linear probe learns to treat it as the
target class.
"""
from mimbd import (EncoderConfig, PlacementSpec, PoisonPlan, PretrainConfig,
                   generate_shapes, make_trigger, pretrain, type1_attack)

TARGET = 0
train = generate_shapes(num_classes=10, per_class=200, image_size=32, seed=0,
                        name="demo-train")
test = generate_shapes(num_classes=10, per_class=25, image_size=32, seed=99,
                       name="demo-test")
encoder, _ = pretrain(PretrainConfig(epochs=12, batch_size=64,
                                     warmup_epochs=2, seed=0), train,
                      EncoderConfig())
print("clean encoder ready")

# --- the poison plan ------------------------------------------------------
# A textured 7x7 trigger (random 4x4 RGB blocks, upsampled), pinned to the
# bottom-right corner; 10% of the training set stamped and relabeled.
plan = PoisonPlan(rate=0.10, target_class=TARGET,
                  trigger=make_trigger("seeded_random", 7, seed=0),
                  placement=PlacementSpec("fixed", coords=(25, 25)),
                  flip_label=True)
probe_kwargs = dict(epochs=150, lr=0.1, weight_decay=0.0, lr_decay=0.98,
                    seed=0)
result = type1_attack(encoder, train, test, plan, probe_kwargs=probe_kwargs,
                      poison_seed=0, stamp_seed=0)
m = result.metrics
print(f"poisoned {int(result.poison_mask.sum())} of {len(train)} "
      f"training samples")

# --- reading the four columns --------------------------------------------
# TA: backdoored model on clean inputs (stealth — should match CA)
# CA: clean model on clean inputs
# ASR: backdoored model on stamped inputs scored as the target class
# ASR_B: clean model on stamped inputs (the accident rate)
print(f"TA={m.ta:.1f}  CA={m.ca:.1f}  ASR={m.asr:.1f}  ASR_B={m.asr_b:.1f}")

# --- two knobs worth turning ------------------------------------------------
# Halving the poisoning rate barely dents the attack...
low = PoisonPlan(rate=0.05, target_class=TARGET, trigger=plan.trigger,
                 placement=plan.placement, flip_label=True)
m2 = type1_attack(encoder, train, test, low, probe_kwargs=probe_kwargs,
                  poison_seed=0, stamp_seed=0,
                  clean_probe=result.clean_probe).metrics
print(f"rate=5%:             ASR={m2.asr:.1f}")

# ...while trigger texture matters a lot at this scale: a flat white patch
# displaces the embedding far less, and the probe struggles to use it.
flat = PoisonPlan(rate=0.10, target_class=TARGET,
                  trigger=make_trigger("white", 7), placement=plan.placement,
                  flip_label=True)
m3 = type1_attack(encoder, train, test, flat, probe_kwargs=probe_kwargs,
                  poison_seed=0, stamp_seed=0,
                  clean_probe=result.clean_probe).metrics
print(f"white trigger, 10%:  ASR={m3.asr:.1f}")
