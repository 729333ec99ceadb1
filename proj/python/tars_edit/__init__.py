"""Python access to the concept-removal toolkit.

The heavy lifting lives in the compiled ``_core`` module; this package
re-exports it and adds a couple of conveniences.
"""

from ._core import (
    ConfigError,
    DimensionError,
    DomainError,
    EditRecord,
    EmptySelectionError,
    InputError,
    IntegrityError,
    ModelConfig,
    ModelWeights,
    PipelineConfig,
    RefinementError,
    ScanHit,
    TargetingSpec,
    TargetingVector,
    TarsError,
    TrainingError,
    UsageError,
    build_targeting_vector,
    causal_probability,
    config_from_json,
    edit,
    extract_approx_vector,
    init_weights,
    kl_divergence,
    lm_head_probe,
    load_checkpoint,
    load_config,
    load_edit_record,
    load_targeting_vector,
    logits,
    percentile,
    reversed_target,
    revert,
    save_checkpoint,
    scan,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["remove_concept"]


def remove_concept(config, weights, concept_id, *, top_k=None, theta=None):
    """Build the concept's targeting vector and edit a copy of ``weights``.

    Returns ``(edited_weights, record, targeting_vector)``. Exactly one of
    ``top_k`` or ``theta`` must be given.
    """
    target = build_targeting_vector(weights, config.targeting_spec(concept_id))
    edited, record = edit(weights, target.v_target, theta=theta, top_k=top_k, concept_id=concept_id)
    return edited, record, target
