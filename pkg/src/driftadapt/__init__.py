"""Online test-time adaptation over embedding streams.

A prototype-classifier model pair adapts to a continually drifting stream
of unlabeled feature batches, predicting online before each update. Ships
the collaborative adaptation method (contrastive + distillation + mutual
learning) alongside entropy-minimization, teacher-consistency, and
no-adapt baselines, plus a synthetic drift generator and an experiment
harness.
"""

from . import backend
from .autodiff import (
    LOG_EPS,
    Parameter,
    Tensor,
    constant,
    cosine_similarity_matrix,
    detach,
    finite_difference_check,
    scaled_softmax,
)
from .data import (
    DatasetFormatError,
    Domain,
    DomainStream,
    SyntheticSuiteConfig,
    assemble_stream,
    generate_synthetic_datasets,
    generate_synthetic_suite,
    load_embedding_dataset,
    load_suite,
    save_embedding_dataset,
    save_suite,
)
from .engine import (
    MethodConfig,
    NonFiniteLossError,
    OptimizerState,
    StepRecord,
    adapt_step,
    ema_update,
    evaluate_dataset,
    evaluate_stream,
    hash_params,
    resolve_learning_rate,
    run_ctta,
    run_domain_generalization,
    sgd_momentum_step,
    trainable_params,
)
from .losses import (
    LossWeights,
    PairIndicator,
    consistency_loss,
    contrastive_loss,
    entropy_loss,
    kd_loss,
    mutual_information,
    mutual_learning_loss,
    pairwise_indicator,
    total_loss,
)
from .model import (
    AffineAdapter,
    EmbeddingDataset,
    ModelPair,
    PrototypeClassifier,
    build_prototypes,
    init_target_from_ssl,
    predict,
)
from .report import RunReport, entropy_accuracy_profile, prediction_shift, summarize

__version__ = "0.1.0"
