"""Culture-aware modeling of per-annotator hate-speech perception.

Pipeline: ingest annotations -> enumerate cultural background combinations
-> aggregate labels into a weighted culture-post matrix -> factorize it ->
assemble per-user hate subspaces -> train a fused classifier -> analyze
subspace redundancy.
"""

from .data import (
    AnnotationRecord,
    AnnotationSchema,
    AttributeValue,
    DataFormatError,
    Dataset,
    Post,
    UserProfile,
    load_annotations,
    load_embeddings,
    save_embeddings,
    split_posts,
)
from .lattice import (
    Combination,
    CombinationUniverse,
    build_annotator_universe,
    build_universe,
    observed_overlap,
    power_set,
)
from .interactions import (
    AggregationCell,
    InteractionMatrix,
    aggregate,
    build_matrix,
    build_post_index,
    inverse_document_frequency,
    tf_hate_fraction,
)
from .factorization import (
    FactorModel,
    InteractionFactorizer,
    factorization_loss,
    gradient_check,
    load_model,
    predict_cell,
    save_model,
)
from .subspace import (
    HateSubspace,
    MixingWeights,
    accumulate_performance,
    build_subspace,
    global_leverage_ordering,
    hate_perception,
    leverage_ordering,
    leverage_scores,
    reconstruction_curve,
    subspace_for,
)
from .classifier import (
    ClassifierHead,
    Metrics,
    PerceptionClassifier,
    decide,
)
from .synthetic import (
    GeneratorConfig,
    PlantedEffect,
    RecoverabilityReport,
    generate,
    recoverability_report,
    write_dataset_files,
)

__version__ = "0.1.0"
