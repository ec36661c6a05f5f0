from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .decode import DecodeConfig, decode, phrases_to_strings
from .network import (
    GradientVector,
    NumericError,
    ShapeError,
    backward,
    batch_grad,
    batch_nll,
    encode_batch,
    finite_difference_gradient,
    forward_nll,
    perplexity,
)
from .params import (
    EOS_ID,
    SEP_ID,
    ConfigError,
    Layout,
    ModelConfig,
    ModelParams,
    Sample,
    init_model,
    parameter_count,
)
from .optim import Adam, cosine_lr
