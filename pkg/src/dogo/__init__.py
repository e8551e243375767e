"""Two-peer online knowledge distillation for self-supervised pre-training."""

from .losses import (
    LossValue,
    SimilarityDistribution,
    combined_objective,
    cosine_similarity_matrix,
    kd_loss,
    normalize_rows,
    nt_xent_loss,
    similarity_distribution,
    simsiam_loss,
)
from .models import EncoderConfig, PeerModel, PredictorConfig, ProjectorConfig, build_peer
from .trainer import PeerSpec, StepRecord, TrainConfig, pretrain, train_step

__version__ = "0.1.0"
