from .checkpoint import import_flownet_weights, load_checkpoint, save_checkpoint
from .model import (
    ConvSpec,
    ModelConfig,
    ModelOutput,
    PoseModel,
    SubNet,
    SubNetConfig,
    assert_no_pooling_or_batchnorm,
    conv_stack,
    full_profile,
    loss_6dof,
    profile,
    tiny_profile,
    total_loss,
)
from .tensor import Tensor, conv2d, dropout, leaky_relu, linear

__all__ = [
    "ConvSpec",
    "ModelConfig",
    "ModelOutput",
    "PoseModel",
    "SubNet",
    "SubNetConfig",
    "Tensor",
    "assert_no_pooling_or_batchnorm",
    "conv2d",
    "conv_stack",
    "dropout",
    "full_profile",
    "import_flownet_weights",
    "leaky_relu",
    "linear",
    "load_checkpoint",
    "loss_6dof",
    "profile",
    "save_checkpoint",
    "tiny_profile",
    "total_loss",
]
