from .tensor import (
    Tensor,
    NumericsError,
    ShapeError,
    DtypeError,
    NonFiniteError,
    BackwardError,
    no_grad,
    finite_checks,
    add,
    sub,
    mul,
    div,
    neg,
    power,
    exp,
    log,
    sqrt,
    tanh,
    gelu,
    matmul,
    reshape,
    transpose,
    swap_axes,
    concat,
    pad_axis,
    take,
    add_rows,
    sum_,
    mean,
    softmax,
    log_softmax,
    layer_norm,
    embedding,
    attention,
    causal_bias,
    l2_normalize,
    cross_entropy,
    mse,
)
from .module import (
    Parameter,
    Module,
    ModuleList,
    Linear,
    LayerNorm,
    Embedding,
    MultiHeadAttention,
    FeedForward,
    TransformerBlock,
    set_trainable_by_prefix,
    normal_init,
)
from .optim import AdamW, MissingStateError
from .gradcheck import grad_check, GradCheckReport, ParamReport
