"""
Type 2: shipping a tampered encoder
===================================

Here the attacker controls the released encoder weights and nothing
else. Starting from the clean encoder, they fine-tune it so that any
image wearing the trigger embeds like a handful of target-class
"reference" images, while clean embeddings stay put (an anchoring term
keeps them near the original encoder's outputs). A victim who
linear-probes the tampered encoder on their own clean data inherits the
backdoor.

The second half runs the deliberately crippled variant that keeps the
pre-training random mask in the loop during the attack: with 75% of
patches hidden, the trigger usually never reaches the encoder, and the
objective cannot lock on.
"""
import numpy as np

from mimbd import (EncoderConfig, PlacementSpec, PretrainConfig, Type2Config,
                   evaluate, filter_class, generate_shapes, make_trigger,
                   pretrain, train_probe, type2_attack,
                   type2_attack_with_mask)

TARGET = 0
train = generate_shapes(num_classes=10, per_class=200, image_size=32, seed=0,
                        name="demo-train")
test = generate_shapes(num_classes=10, per_class=25, image_size=32, seed=99,
                       name="demo-test")
clean, _ = pretrain(PretrainConfig(epochs=12, batch_size=64, warmup_epochs=2,
                                   seed=0), train, EncoderConfig())

# --- the attacker's ingredients -------------------------------------------
# Three reference images of the target class, a shadow set (any unlabeled
# images will do — here a 10% slice), and the trigger.
refs = filter_class(train, TARGET).images[:3]
rng = np.random.default_rng(0)
shadow = train.subset(np.sort(rng.choice(len(train), 200, replace=False)))
attack_cfg = Type2Config(reference_images=refs,
                         trigger=make_trigger("seeded_random", 7, seed=0),
                         placement=PlacementSpec("fixed", coords=(25, 25)),
                         epochs=24, batch_size=64, lr=0.05, seed=0)
backdoored = type2_attack(clean, attack_cfg, shadow)

# --- the victim's side -----------------------------------------------------
# The victim probes whatever encoder they were handed, on clean data.
probe_kwargs = dict(epochs=150, lr=0.1, weight_decay=0.0, lr_decay=0.98,
                    seed=0)
for name, enc in (("clean", clean), ("backdoored", backdoored)):
    probe = train_probe(enc, train, **probe_kwargs)
    m = evaluate(enc, probe, test, attack_cfg.trigger, attack_cfg.placement,
                 TARGET, stamp_seed=0)
    print(f"{name:>11}: TA={m.ta:.1f}  ASR={m.asr:.1f}")

# --- the with-mask ablation -------------------------------------------------
broken = type2_attack_with_mask(clean, attack_cfg, shadow)
probe = train_probe(broken, train, **probe_kwargs)
m = evaluate(broken, probe, test, attack_cfg.trigger, attack_cfg.placement,
             TARGET, stamp_seed=0)
print(f"{'with-mask':>11}: TA={m.ta:.1f}  ASR={m.asr:.1f}   "
      f"(masking starves the objective)")
