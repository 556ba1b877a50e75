"""Patch-subspace VAE: heterogeneous image artifact removal.

A single convolutional encoder maps overlapping image patches into a
Gaussian-mixture latent space; each patch's soft cluster assignment routes
it to one of several independently trained decoders, and the decoded
patches are blended back into a full image.
"""

from .errors import (
    CalibrationError,
    CheckpointError,
    ConfigError,
    ConstructionError,
    ContractError,
    DimensionError,
    DomainError,
    GridError,
    NumericError,
    PsvaeError,
)
from .tensor import Tensor, GradTape, backward
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .patching import PatchGridSpec, PatchRecord, assemble, split
from .noise import (
    ArtifactComponent,
    ArtifactModel,
    NoiseParams,
    calibrate_to_psnr,
    corrupt,
    make_artifact_model,
    sample_masks,
)
from .metrics import MetricReport, MetricRow, ms_ssim, psnr, score_pair, ssim, uqi
from .model import (
    ArchDescriptor,
    BatchLatent,
    GmmPrior,
    LatentCode,
    ModelParams,
    build_model,
    decode,
    decode_batch,
    encode,
    encode_batch,
    load_checkpoint,
    route,
    save_checkpoint,
)
from .losses import (
    LossConfig,
    categorical_kl,
    cosine_similarity,
    decoder_loss,
    encoder_loss,
    gaussian_kl,
    mse_loss,
    nt_xent_loss,
)
from .training import TrainConfig, TrainReport, infer, train_stage1, train_stage2

__version__ = "0.1.0"
