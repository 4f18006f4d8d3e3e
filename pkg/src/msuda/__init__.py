"""Multi-site cross-modality domain adaptation for volumetric segmentation.

Pipeline stages: phantom data generation, preprocessing, site-conditioned
unpaired translation, hard-sample oversampling by style interpolation,
segmentation training, pseudo-label-filtered self-training, evaluation.
"""

from .volume import (
    Volume, LabelMap, PreprocessConfig, VolumeError,
    load_volume, save_volume, load_labelmap, save_labelmap,
    reorient, resample, crop_about_landmark, normalize, preprocess_case,
)
from .phantom import PhantomConfig, SiteStyle, generate_dataset, style_signature
from .intensity import (
    AugmentConfig, label_assisted_transform, augment_local_intensity,
    augment_contrast, flip_lr,
)
from .synthesis import (
    GeneratorConfig, SynthesisNets, train_synthesis, translate,
    dice_ce_loss, edge_loss, qs_attn_nce, lr_for_epoch,
)
from .segmentation import (
    SegConfig, SegMemberSpec, train_segmenter, train_ensemble, predict,
    Prediction,
)
from .selftrain import filter_pseudo_label, self_training_round, PseudoLabelRecord
from .oversample import (
    HardSampleRule, select_hard_samples, generate_unseen_codes, oversample,
)
from .metrics import (
    dice, assd, boundary_assd, evaluate_dataset, MetricReport,
    write_report_csv, write_report_markdown,
)

__version__ = "0.1.0"
