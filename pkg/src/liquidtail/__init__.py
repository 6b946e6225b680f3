"""liquidtail: autoregressive generation with continuous token maturation.

Tokens live as vectors in embedding space and are only discretized after
stabilizing in a K-slot "liquid tail"; see README.md for the full tour.
"""

from .backbone import Backbone, BackboneConfig, MaskKind
from .corpus import Vocab, load_checkpoint, save_checkpoint
from .embeddings import (
    EmbeddingTable,
    commit,
    implicit_entropy,
    normalize_to_sphere,
    random_table,
    top_k_candidates,
)
from .maturation import (
    GenerationSession,
    MaturationConfig,
    TailState,
    alpha_profile,
    cfg_combine,
    generate,
    init_tail,
    intervene_ema,
    intervene_noise,
    maturation_step,
    new_session,
    step_once,
)
from .training import LossConfig, TrainConfig, batch_loss, infonce_loss, mse_loss, train

__version__ = "0.1.0"
