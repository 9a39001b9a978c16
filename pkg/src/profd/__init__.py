"""Prompt-guided part feature disentangling for occluded person retrieval."""

from .alignment import PatchLabels, alignment_loss, pool_mask, score_map
from .config import TrainConfig, config_hash, load_config, save_config
from .core import (
    Dims,
    EncoderFailure,
    EncoderHandle,
    FeatureMap,
    PretrainedVLEncoder,
    StubEncoder,
    TokenSequence,
    make_encoder,
    tokenize,
)
from .data import (
    DatasetSplits,
    PKSampler,
    Sample,
    SyntheticSpec,
    corrupt_masks,
    generate_dataset,
    load_dataset,
    read_mask_file,
    save_dataset,
    write_mask_file,
)
from .decoder import (
    DecoderConfig,
    HybridDecoder,
    MultiheadCrossAttention,
    PartFeatures,
    SpatialAttention,
    attention_loss,
    diversity_loss,
    hybrid_decode,
    reverse_cross_attention,
    semantic_attention,
    spatial_attention,
)
from .evaluation import (
    EmbeddingSet,
    MetricsReport,
    cmc_map,
    distance_matrix,
    read_embeddings,
    write_embeddings,
)
from .losses import LossReport, NaNLossError, id_loss, total_loss, triplet_loss
from .memory import (
    MemoryBank,
    init_global_bank,
    init_local_bank,
    pcl_loss,
    update_bank,
    weighted_average_pool,
)
from .model import ModelOutput, ProFDModel
from .prompts import PromptBank, build_part_prompts, prompt_embeddings
from .training import (
    TrainResult,
    ablation_suite,
    embed_samples,
    evaluate_model,
    load_checkpoint,
    lr_for_epoch,
    save_checkpoint,
    train_model,
    visibility_accuracy,
)
from .visibility import (
    PersonEmbedding,
    VisibilityHead,
    cosine_distance,
    focal_loss,
    pairwise_distance,
    predict_visibility,
    visibility_targets,
)

__version__ = "0.1.0"
