"""Weakly incremental semantic segmentation toolkit.

Generates dense pseudo labels for image-level-labelled classes by fusing
vision-language score maps with seed-guided self-supervised attention,
optimizes them through a plug-in teacher with pixel BCE and a dense
contrastive loss, replays old-class crops from a memory bank, and
distills everything into an incrementally grown student model.
"""

__version__ = "0.1.0"

from .config import RunConfig, TrainConfig, load_run_config
from .coseg import (
    CosegParams,
    PseudoLabelSet,
    binarize_topk,
    encode_text,
    foreground_of,
    fuse_masks,
    generate_pseudo_labels,
    initial_mask,
    normalize_features,
    read_mask_cache,
    sample_seeds,
    seed_attention_mask,
    write_mask_cache,
)
from .distill import (
    combine_supervision,
    loss_bce_all,
    one_hot_hard,
    run_incremental_step,
    train_base,
)
from .eval_protocol import ConfusionMatrix, confusion_update, miou
from .kernels import NUMBA_ENABLED
from .label_space import (
    DatasetIndex,
    Taxonomy,
    build_taxonomy,
    classes_seen,
    split_dataset,
)
from .memory_paste import MemoryBank, bank_insert, bank_sample, copy_paste
from .teacher import (
    ContrastBatch,
    TeacherHead,
    build_old_targets,
    loss_bce_new,
    loss_bce_old,
    loss_dcl,
    sample_contrast_points,
    teacher_forward,
    total_loss,
)
