"""Global contrastive learning with multi-state Metropolis-Hastings negatives."""
from .config import (
    BETA_PRESETS,
    DatasetSpec,
    EncoderSpec,
    ExperimentConfig,
    TrainConfig,
    fig7_preset,
    load_config,
)
from .data import Dataset, load_dataset_csv, synth_dataset, write_dataset_csv
from .encoders import Encoder, encode, grad_similarity, similarity
from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    EMC2Error,
    NumericError,
    ParseError,
    SizeError,
)
from .loss import exact_grad, global_loss, infonce_grad, infonce_loss, loss_and_grad, softmax_neg_dist
from .optim import MiniBatchSample, RunRecord, TrainState, emc2_gradient_estimate, run_training
from .rng import RandomStream
from .sampler import ChainTable, mh_accept_ratio, mh_step

__version__ = "0.1.0"
