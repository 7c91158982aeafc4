"""Attack-pipeline contract tests at micro scale.

These check *scoping* (what each attack is allowed to touch) and plumbing,
not attack strength; efficacy at desk scale lives in the end-to-end suite.
"""
import numpy as np
import pytest

from mimbd.attacks import (Type2Config, clone_model, type1_attack, type2_attack,
                           type2_attack_with_mask, type3_attack)
from mimbd.data import generate_shapes
from mimbd.errors import ConfigError
from mimbd.model import EncoderConfig, MIMModel
from mimbd.train_eval import PretrainConfig, pretrain
from mimbd.trigger import PlacementSpec, PoisonPlan, make_trigger

TINY = EncoderConfig(image_size=16, patch_size=4, embed_dim=24, depth=2,
                     num_heads=3, decoder_dim=16, decoder_depth=1,
                     decoder_heads=2)
PROBE_KW = dict(epochs=8, lr=0.1, seed=0)


def _micro_sets():
    train = generate_shapes(3, 10, 16, seed=0, name="micro-train")
    test = generate_shapes(3, 5, 16, seed=7919, name="micro-test")
    return train, test


def _micro_model(seed=0):
    return MIMModel(TINY, seed=seed)


def _plan(flip, strategy="fixed", count=1, rate=0.2):
    coords = (13, 13) if strategy == "fixed" else None
    return PoisonPlan(rate=rate, target_class=0, trigger=make_trigger("white", 3),
                      placement=PlacementSpec(strategy=strategy, count=count,
                                              coords=coords),
                      flip_label=flip)


def _param_bytes(params):
    return b"".join(p.value.tobytes() for p in params)


def test_clone_model_copies_without_aliasing():
    model = _micro_model(seed=3)
    twin = clone_model(model)
    for a, b in zip(model.params(), twin.params()):
        assert np.array_equal(a.value, b.value)
        assert a.value is not b.value
    twin.params()[0].value += 1.0
    assert not np.array_equal(model.params()[0].value, twin.params()[0].value)


def test_type1_requires_label_flipping():
    train, test = _micro_sets()
    with pytest.raises(ConfigError):
        type1_attack(_micro_model(), train, test, _plan(flip=False),
                     probe_kwargs=PROBE_KW)


def test_type1_scoping_and_poison_bookkeeping():
    train, test = _micro_sets()
    model = _micro_model()
    before = _param_bytes(model.params())
    res = type1_attack(model, train, test, _plan(flip=True, rate=0.2),
                       probe_kwargs=PROBE_KW)
    # the encoder is the victim's: type1 must never write to it
    assert _param_bytes(model.params()) == before

    mask, poisoned = res.poison_mask, res.poisoned_train
    n_nontarget = int((train.labels != 0).sum())
    assert mask.sum() == round(0.2 * len(train))
    assert np.all(train.labels[mask] != 0)          # victims drawn off-target
    assert np.all(poisoned.labels[mask] == 0)       # ...and relabeled to it
    untouched = ~mask
    assert np.array_equal(poisoned.images[untouched], train.images[untouched])
    assert np.array_equal(poisoned.labels[untouched], train.labels[untouched])
    assert not np.array_equal(poisoned.images[mask], train.images[mask])

    m = res.metrics
    for v in (m.ta, m.ca, m.asr, m.asr_b):
        assert v is not None and 0.0 <= v <= 100.0
    assert n_nontarget >= mask.sum()


def test_type1_reuses_supplied_clean_probe():
    train, test = _micro_sets()
    model = _micro_model()
    first = type1_attack(model, train, test, _plan(flip=True),
                         probe_kwargs=PROBE_KW)
    again = type1_attack(model, train, test, _plan(flip=True),
                         probe_kwargs=PROBE_KW, clean_probe=first.clean_probe)
    assert again.clean_probe is first.clean_probe
    assert again.metrics.ca == first.metrics.ca


def _type2_config(train, epochs=3, **kw):
    refs = train.images[train.labels == 0][:2]
    return Type2Config(reference_images=refs, trigger=make_trigger("white", 3),
                       placement=PlacementSpec(strategy="fixed", coords=(13, 13)),
                       epochs=epochs, batch_size=16, lr=0.05, seed=0, **kw)


def test_type2_config_validation():
    train, _ = _micro_sets()
    refs = train.images[:1]
    trig = make_trigger("white", 3)
    pl = PlacementSpec(strategy="fixed", coords=(13, 13))
    with pytest.raises(ConfigError):
        Type2Config(reference_images=np.zeros((0, 16, 16, 3)), trigger=trig,
                    placement=pl)
    with pytest.raises(ConfigError):
        Type2Config(reference_images=refs, trigger=trig, placement=pl,
                    lambda1=-0.5)
    with pytest.raises(ConfigError):
        Type2Config(reference_images=refs, trigger=trig, placement=pl,
                    optimizer="lbfgs")


def test_type2_touches_encoder_only():
    train, _ = _micro_sets()
    clean = _micro_model(seed=1)
    pretrained, _ = pretrain(PretrainConfig(epochs=1, batch_size=16,
                                            warmup_epochs=0, seed=0), train, TINY)
    cfg = _type2_config(train)
    bd = type2_attack(pretrained, cfg, train)
    enc_names = {p.name for p in pretrained.encoder_params()}
    for src, dst in zip(pretrained.params(), bd.params()):
        if src.name in enc_names:
            continue
        assert np.array_equal(src.value, dst.value), src.name
    changed = any(not np.array_equal(s.value, d.value)
                  for s, d in zip(pretrained.encoder_params(), bd.encoder_params()))
    assert changed
    # the victim's copy itself is never written to
    assert clean is not bd


def test_type2_zero_epochs_is_identity():
    train, _ = _micro_sets()
    model = _micro_model(seed=2)
    cfg = _type2_config(train, epochs=0, lambda1=5.0, lambda2=5.0)
    bd = type2_attack(model, cfg, train)
    assert _param_bytes(bd.params()) == _param_bytes(model.params())


def test_type2_pulls_stamped_embeddings_toward_references():
    from mimbd.trigger import stamp_all
    train, _ = _micro_sets()
    model, _ = pretrain(PretrainConfig(epochs=2, batch_size=16, warmup_epochs=0,
                                       seed=0), train, TINY)
    cfg = _type2_config(train, epochs=6)
    bd = type2_attack(model, cfg, train)

    def mean_cos(m):
        stamped = stamp_all(train, cfg.trigger, cfg.placement, seed=123).images
        es = m.embed(stamped)
        er = m.embed(cfg.reference_images)
        es /= np.linalg.norm(es, axis=1, keepdims=True)
        er /= np.linalg.norm(er, axis=1, keepdims=True)
        return float((es @ er.T).mean())

    # near-ceiling baseline on micro images, so check the gap to 1 shrinks
    before, after = mean_cos(model), mean_cos(bd)
    assert after > before
    assert (1.0 - after) < 0.5 * (1.0 - before)


def test_type2_with_mask_diverges_from_mask_free():
    train, _ = _micro_sets()
    model = _micro_model(seed=4)
    bd_plain = type2_attack(model, _type2_config(train, epochs=2), train)
    bd_masked = type2_attack_with_mask(model, _type2_config(train, epochs=2),
                                       train)
    assert _param_bytes(bd_plain.params()) != _param_bytes(bd_masked.params())
    # the broken variant still respects the scoping contract
    enc_names = {p.name for p in model.encoder_params()}
    for src, dst in zip(model.params(), bd_masked.params()):
        if src.name not in enc_names:
            assert np.array_equal(src.value, dst.value), src.name


def test_type2_rejects_empty_shadow():
    train, _ = _micro_sets()
    with pytest.raises(ConfigError):
        type2_attack(_micro_model(), _type2_config(train), train.subset([]))


def test_type3_variant_placement_agreement():
    train, test = _micro_sets()
    pc = PretrainConfig(epochs=1, batch_size=16, warmup_epochs=0, seed=0)
    with pytest.raises(ConfigError):
        type3_attack(train, _plan(False, "multiple_grid", 4), "R", pc, TINY,
                     train, test, probe_kwargs=PROBE_KW)
    with pytest.raises(ConfigError):
        type3_attack(train, _plan(False, "random", 1), "M", pc, TINY,
                     train, test, probe_kwargs=PROBE_KW)
    with pytest.raises(ConfigError):
        type3_attack(train, _plan(False, "random", 1), "Q", pc, TINY,
                     train, test, probe_kwargs=PROBE_KW)


def test_type3_poisons_only_target_class_images():
    train, test = _micro_sets()
    pc = PretrainConfig(epochs=1, batch_size=16, warmup_epochs=0, seed=0)
    plan = _plan(False, "random", 1, rate=0.5)
    res = type3_attack(train, plan, "R", pc, TINY, train, test,
                       probe_kwargs=PROBE_KW)
    mask, poisoned = res.poison_mask, res.poisoned_pretrain
    target_rows = train.labels == 0
    assert mask.sum() == round(0.5 * target_rows.sum())
    assert np.all(target_rows[mask])                 # only target-class rows
    assert np.array_equal(poisoned.labels, train.labels)  # labels untouched
    assert np.array_equal(poisoned.images[~mask], train.images[~mask])
    assert not np.array_equal(poisoned.images[mask], train.images[mask])


def test_type3_reuses_supplied_clean_model():
    train, test = _micro_sets()
    pc = PretrainConfig(epochs=1, batch_size=16, warmup_epochs=0, seed=0)
    clean, _ = pretrain(pc, train, TINY)
    plan = _plan(False, "multiple_grid", 4, rate=0.5)
    res = type3_attack(train, plan, "M", pc, TINY, train, test,
                       probe_kwargs=PROBE_KW, clean_model=clean)
    assert res.clean_model is clean
    m = res.metrics
    for v in (m.ta, m.ca, m.asr, m.asr_b):
        assert v is not None and 0.0 <= v <= 100.0
