"""Multi-step quantization-compensation attacks on relaxed token sequences."""

from ._kernels import BACKEND
from .attack import (
    AttackConfig,
    AttackResult,
    CandidateScore,
    OptimizerConfig,
    ZooConfig,
    direction_score,
    evaluate_and_quantize,
    run_attack,
    run_gray,
    run_mango,
    run_naive,
    select_candidates,
    select_vector,
    zoo_gradient,
)
from .harness import TaskSpec, build_task, compare_variants, run_batch
from .loss import AdversarialLoss, LossBreakdown, LossWeights, composite_loss, quantization_gap
from .models import CountingClassifier, ToyClassifier, ToyReferenceModel, gradient_check
from .optimizers import OptimizerState, StepSchedule, steps_for_loop
from .relaxation import (
    RelaxedSequence,
    TokenSequence,
    Vocabulary,
    embed,
    entropy,
    initialize_relaxed,
    quantize,
    to_token_sequence,
)

__version__ = "0.1.0"
