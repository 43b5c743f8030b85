from .checkpoint import CheckpointError, load_tensors, save_tensors
from .conv import conv2d, conv_out_size, deconv2d, deconv_out_size
from .nn import Params, lstm_cell, lstm_params
from .optim import Adam, AdamState, NonFiniteGradient, adam_step
from .tensor import (
    KL_EPS,
    LEAKY_SLOPE,
    DimensionError,
    Tape,
    Tensor,
    add,
    backward,
    binary_cross_entropy,
    channel_softmax,
    concat,
    cross_entropy,
    div,
    exp,
    getitem,
    kl_loss,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    sparse_apply,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)
