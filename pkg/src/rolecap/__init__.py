"""Role-conditioned caption synthesis, scoring, and budgeted curation."""

from .captions import (
    GRANULARITIES,
    LONG,
    SHORT,
    CaptionRecord,
    Granularity,
    ImageItem,
    load_corpus,
    prefilter,
    render_caption_prompt,
    run_generation,
    word_count,
)
from .dataset import (
    DatasetManifest,
    TrainingConfigExport,
    corpus_stats,
    export_training_config,
    read_shards,
    write_shards,
)
from .filtering import (
    FilterConfig,
    NormalizedRecord,
    ScoredRecord,
    SelectionResult,
    cap_and_refill,
    normalize_scores,
    parse_score_response,
    render_filter_prompt,
    score_pairs,
    selection_stats,
)
from .gateway import (
    ChatGateway,
    ChatTurn,
    EndpointConfig,
    ImagePayload,
    SamplingParams,
    complete_chat,
    default_generation_params,
)
from .numerics import (
    CollisionSpec,
    CorrespondenceMatrix,
    PositionalTable,
    SimilarityBatch,
    collision_probability,
    extend_positional_table,
    loss_gradient,
    multipositive_loss,
    multipositive_loss_i2t,
)
from .roles import RoleSet, RoleSpec, builtin_roles, generate_roles, load_roles, write_roles

__version__ = "0.1.0"
