"""dflens: saliency and time-step analysis for toy conditional diffusion models."""

from .data import (
    COLORS,
    QUADRANTS,
    SHAPES,
    TOKEN_NAMES,
    VOCAB_SIZE,
    Scene,
    render,
    sample_dataset,
    sample_scenes,
)
from .denoiser import (
    ArchSpec,
    CheckpointError,
    ConditionTokens,
    Denoiser,
    ForwardTrace,
    TrainingDiverged,
    generate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .diffusion import (
    NoiseSchedule,
    TimestepPlan,
    ddim_step,
    ddpm_step,
    exponential_timesteps,
    make_plan,
    make_schedule,
    predict_x0,
    q_sample,
    uniform_timesteps,
)
from .evaluation import (
    PerturbationCurve,
    RelevanceProfile,
    auc,
    concept_relevance,
    ordering_baseline,
    perturbation_game,
    saliency_ordering,
)
from .saliency import (
    MaskBatch,
    SaliencyMap,
    SimilarityConfig,
    df_cam,
    df_rise,
    generate_masks,
    minmax_normalize,
    similarity,
)
from .tensor import Tensor, ShapeError, backward, no_grad

__version__ = "0.1.0"
