"""mimbd: a desk-scale lab for backdoor attacks and defenses across the
masked-image-modeling supply chain.

The pipeline mirrors the three places an attacker can stand:

* the unlabeled pre-training set (type3_R / type3_M poisoning),
* the released encoder (type2 / type2_with_mask reference-image attacks),
* the labeled downstream set (type1 stamp-and-relabel poisoning),

and three detector families (neural_cleanse, strip, spectral) that try to
catch them. Everything runs on CPU with numpy in minutes: 32x32 images,
a 4-block masked-autoencoder transformer, linear probing.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Dataset, ImageSample, bilinear_resize, filter_class,
                   generate_shapes, load_cifar_binary, load_dataset, resize,
                   save_cifar_binary, save_dataset, split)
from .defenses import (Classifier, DetectionReport, NCConfig,
                       mad_anomaly_index, neural_cleanse, shannon_entropy,
                       spectral_scores, spectral_signature_defense, strip)
from .errors import (CapabilityError, ConfigError, FormatError, MimbdError,
                     NumericsError, PlacementError)
from .attacks import (Type1Result, Type2Config, Type3Result, clone_model,
                      type1_attack, type2_attack, type2_attack_with_mask,
                      type3_attack)
from .harness import RunConfig, masksim, report, run
from .maskmath import (CoverageSpec, expected_visible_covered, patches_covered,
                       survival_probability_exact, survival_probability_mc)
from .model import (EncoderConfig, MaskPlan, MIMModel, patchify,
                    reconstruction_loss, sample_mask, unpatchify)
from .train_eval import (LinearProbe, Metrics, PretrainConfig, evaluate,
                         pair_metrics, predict, pretrain, project_2d,
                         train_probe)
from .trigger import (PlacementSpec, PoisonPlan, TriggerPattern,
                      export_trigger, load_trigger, make_trigger,
                      place_trigger, poison_labeled,
                      poison_unlabeled_target_class, stamp_all,
                      trigger_positions)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # data
    "Dataset", "ImageSample", "generate_shapes", "split", "filter_class",
    "resize", "bilinear_resize", "load_cifar_binary", "save_cifar_binary",
    "load_dataset", "save_dataset",
    # triggers & poisoning
    "TriggerPattern", "PlacementSpec", "PoisonPlan", "make_trigger",
    "place_trigger", "stamp_all", "trigger_positions", "poison_labeled",
    "poison_unlabeled_target_class", "export_trigger", "load_trigger",
    # model
    "EncoderConfig", "MaskPlan", "MIMModel", "sample_mask", "patchify",
    "unpatchify", "reconstruction_loss", "save_checkpoint", "load_checkpoint",
    # training / evaluation
    "PretrainConfig", "pretrain", "LinearProbe", "train_probe", "predict",
    "Metrics", "pair_metrics", "evaluate", "project_2d",
    # attacks
    "Type1Result", "Type2Config", "Type3Result", "clone_model",
    "type1_attack", "type2_attack", "type2_attack_with_mask", "type3_attack",
    # defenses
    "Classifier", "DetectionReport", "NCConfig", "mad_anomaly_index",
    "neural_cleanse", "shannon_entropy", "strip", "spectral_scores",
    "spectral_signature_defense",
    # orchestration
    "RunConfig", "run", "report", "masksim",
    # maskmath
    "CoverageSpec", "patches_covered", "survival_probability_exact",
    "survival_probability_mc", "expected_visible_covered",
    # errors
    "MimbdError", "ConfigError", "CapabilityError", "FormatError",
    "PlacementError", "NumericsError",
]
