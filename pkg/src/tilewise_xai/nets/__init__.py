"""Networks: the tile classifier with its slide-level max pooling, and the
pixel segmentation net used as an annotation oracle."""

from .classifier import (
    DEFAULT_CONV_WIDTHS,
    DEFAULT_HEAD_WIDTHS,
    DEFAULT_POOL_AFTER,
    MilModel,
    NetError,
    TileClassifier,
    mil_forward,
    mil_train_epoch,
    mil_train_step,
    pretrain_epoch,
    pretrain_step,
)
from .segnet import (
    LESION_CHANNEL,
    N_CLASSES,
    SegNet,
    dice_loss,
    dice_loss_graph,
    mask_to_onehot,
    seg_train_epoch,
    seg_train_step,
)

__all__ = [
    "DEFAULT_CONV_WIDTHS",
    "DEFAULT_HEAD_WIDTHS",
    "DEFAULT_POOL_AFTER",
    "MilModel",
    "NetError",
    "TileClassifier",
    "mil_forward",
    "mil_train_epoch",
    "mil_train_step",
    "pretrain_epoch",
    "pretrain_step",
    "LESION_CHANNEL",
    "N_CLASSES",
    "SegNet",
    "dice_loss",
    "dice_loss_graph",
    "mask_to_onehot",
    "seg_train_epoch",
    "seg_train_step",
]
