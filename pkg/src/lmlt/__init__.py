"""Multi-level windowed self-attention super-resolution engine.

numpy-backed forward pass with reverse-mode autodiff, toy training,
image metrics, and an analytic parameter/MAC cost model for the
tiny/small/base/large preset family.
"""

from .analysis import (
    CompareRow,
    CostReport,
    CostRow,
    acts_count,
    compare_wsa_lmlt,
    cost_report,
    flops_model,
    layer_table,
    param_count,
    verify_flops,
)
from .attention import (
    AblationFlags,
    AttnParams,
    HeadPlan,
    flops_lmlt_head,
    flops_wsa,
    lmlt_forward,
    window_self_attention,
)
from .errors import (
    BadMagicError,
    ConfigError,
    DeterminismError,
    EngineError,
    ImageFormatError,
    ManifestError,
    ShapeError,
    SizeError,
    TrainingError,
    TruncatedError,
    UnsupportedDepthError,
    VerificationError,
    VersionError,
    WeightFormatError,
)
from .image import (
    PlanarImage,
    bicubic_resize,
    png_load,
    png_save,
    psnr_y,
    rgb_to_y,
    ssim_y,
)
from .model import (
    ModelConfig,
    WeightStore,
    ccm_forward,
    check_weights,
    init_weights,
    lhs_block_forward,
    load_weights,
    model_forward,
    parameter_shapes,
    preset,
    save_weights,
)
from .ops import (
    ConvSpec,
    WindowGrid,
    conv2d,
    crop,
    gelu,
    layer_norm,
    pad_to_grid,
    pixel_shuffle,
    pixel_unshuffle,
    pool_half,
    upsample2x,
    window_partition,
    window_reverse,
)
from .rng import Rng
from .tensor import (
    CheckReport,
    Tape,
    Tensor,
    backward,
    elementwise,
    fd_gradcheck,
    fresh_tape,
    l1_loss,
    matmul,
    no_grad,
    softmax_rows,
    tensor_new,
)
from .train import Adam, cosine_lr, gradcheck_model, smoothed, train_toy

__version__ = "0.1.0"
