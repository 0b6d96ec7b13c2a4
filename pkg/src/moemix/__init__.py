"""Branch a small byte-level language model into domain experts, mix them
into a mixture-of-experts, and compare against dense and ensemble baselines.

The subpackages split along pipeline stages: ``autodiff`` (tape-based
reverse mode on numpy), ``model`` (the dense decoder), ``moe`` (routing and
mixture layers), ``merge`` (checkpoint surgery: branch, average, mix,
upcycle, split, blend), ``data`` (synthetic domain corpora and batching),
``train`` (AdamW, schedules, checkpoints, stage drivers), ``btm`` (tf-idf
expert selection and output ensembling), ``evalkit`` (perplexity reports
and routing analytics), and ``cli`` (the end-to-end pipeline driver).
"""

from . import autodiff, btm, data, evalkit, merge, model, moe, train
from .autodiff import Tape, Tensor, gradcheck, precision
from .data import Corpus, CorpusSpec, MixtureSpec, build_corpus, sample_batch
from .errors import (
    AlignmentError,
    CheckpointError,
    ContractError,
    DataError,
    DimensionError,
    NumericError,
    SurgeryError,
)
from .merge import (
    average_params,
    blend_experts,
    branch,
    build_freeze_mask,
    mix_to_moe,
    split_experts,
    upcycle,
)
from .model import DenseModel, ModelConfig
from .moe import MoEModel, RouterConfig
from .train import (
    AdamW,
    Checkpoint,
    Schedule,
    TrainConfig,
    finetune_moe,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train_dense,
    train_expert,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AlignmentError",
    "Checkpoint",
    "CheckpointError",
    "ContractError",
    "Corpus",
    "CorpusSpec",
    "DataError",
    "DenseModel",
    "DimensionError",
    "MixtureSpec",
    "ModelConfig",
    "MoEModel",
    "NumericError",
    "RouterConfig",
    "Schedule",
    "SurgeryError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "autodiff",
    "average_params",
    "blend_experts",
    "branch",
    "btm",
    "build_corpus",
    "build_freeze_mask",
    "data",
    "evalkit",
    "finetune_moe",
    "gradcheck",
    "load_checkpoint",
    "merge",
    "mix_to_moe",
    "model",
    "model_from_checkpoint",
    "moe",
    "precision",
    "sample_batch",
    "save_checkpoint",
    "split_experts",
    "train",
    "train_dense",
    "train_expert",
    "upcycle",
]
