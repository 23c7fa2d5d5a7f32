from .errors import (
    CompatibilityError,
    ConfigError,
    ContractError,
    DimensionError,
    GeometryError,
    IntegrityError,
    NumericError,
    PanelFusionError,
)
from .gradcheck import grad_check
from .ops import (
    attention,
    avg_pool2x,
    concat,
    conv2d,
    cosine_sim,
    cross_entropy,
    embed,
    group_norm,
    l2_normalize,
    linear,
    log_softmax,
    matmul,
    mse,
    silu,
    softmax,
    upsample2x,
)
from .optim import Adam, AdamState, adam_step
from .rng import Rng, splitmix64
from .tensor import Tensor, is_grad_enabled, no_grad

__all__ = [name for name in dir() if not name.startswith("_")]
