from trainvar.nn.checkpoint import load_checkpoint, save_checkpoint
from trainvar.nn.init import SCHEMES, init_weights
from trainvar.nn.layers import (
    ConfigError,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    MaxPool2d,
    ReLU,
    Softmax,
    Upsample2d,
)
from trainvar.nn.losses import (
    LossWeights,
    cross_entropy_loss,
    dice_loss,
    total_loss,
)
from trainvar.nn.model import (
    Model,
    NetworkSpec,
    NumericBlowUp,
    backward,
    forward,
    loss_and_grads,
    mnist_net,
    predict,
    segmentation_net,
)
from trainvar.nn.train import (
    EpochRecord,
    TrainConfig,
    TrainResult,
    read_losses,
    sgdr_lr,
    train,
    write_losses,
)

__all__ = [
    "SCHEMES", "ConfigError", "Conv2d", "Dense", "Dropout", "EpochRecord", "Flatten", "LossWeights",
    "MaxPool2d", "Model", "NetworkSpec", "NumericBlowUp", "ReLU", "Softmax", "TrainConfig",
    "TrainResult", "Upsample2d", "backward", "cross_entropy_loss", "dice_loss", "forward",
    "init_weights", "load_checkpoint", "loss_and_grads", "mnist_net", "predict", "read_losses",
    "save_checkpoint", "segmentation_net", "sgdr_lr", "total_loss", "train", "write_losses",
]
