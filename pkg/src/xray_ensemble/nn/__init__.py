from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import (
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    dropout,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
    softmax,
)
from .network import LayerSpec, Network, cross_entropy, loss_and_grad
from .optim import AdamState, NonFiniteGradientError, adam_step
