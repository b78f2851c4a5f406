"""Deterministic dense-tensor network kernels."""
from .checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, check_stack, grad_check
from .layers import (AvgPool, Dense, Dropout, Elu, Flatten, Layer, LogClamp, NonFiniteError, ShapeError,
                     SpatialConv, Square, TemporalConv, backward_stack, forward_stack, layer_backward,
                     layer_forward, stack_output_shape)
from .params import ModelParams, NonFiniteUpdate, ParamTensor, adam_step, glorot_bound, init_params
from .rng import Rng
