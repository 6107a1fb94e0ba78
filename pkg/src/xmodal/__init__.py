"""xmodal: multi-modal encoders on a shared unit hypersphere.

Trains per-modality encoders with instance-weighted margin softmax,
RBF intra-class pull, and cosine cross-entropy against a single shared
class-weight matrix; evaluates cross-modal retrieval with mAP.
"""

from .data import (
    GenConfig,
    MultiModalDataset,
    Split,
    datasets_equal,
    generate,
    read_dataset,
    sample_batch,
    write_dataset,
)
from .errors import (
    BadArgs,
    BadConfig,
    ConflictingFlags,
    DimensionMismatch,
    DivergenceDetected,
    EmptyGallery,
    EmptyModality,
    FormatError,
    InsufficientData,
    InvalidLabel,
    NearZeroNorm,
    NonFiniteLoss,
    NoValidClass,
    VersionMismatch,
    XModalError,
)
from .geometry import angle, cosine, normalize, pairwise_sq_dists
from .gradients import FDCheck, GradientBundle, finite_diff_check, grad_total
from .losses import (
    CE,
    IC,
    IV,
    LOSS_FLAGS,
    NS_PRIME,
    HyperParams,
    LabeledEmbeddings,
    LossBreakdown,
    compute_gamma,
    loss_ce,
    loss_ic,
    loss_iv,
    loss_ns_prime,
    loss_total,
)
from .model import (
    Encoder,
    ModelConfig,
    ModelParams,
    RawBatch,
    forward,
    init_params,
)
from .retrieval import (
    RetrievalReport,
    average_precision,
    cross_modal_matrix,
    margin_satisfaction,
    matrix_csv,
    rank_gallery,
)
from .training import (
    Checkpoint,
    TrainConfig,
    TrainLog,
    TrainRecord,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
    train,
)

__version__ = "0.1.0"
