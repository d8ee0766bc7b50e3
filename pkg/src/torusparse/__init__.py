"""Unsupervised image model: sparse dictionary codes composed with a
learned compact commutative group transform, with full inference,
training, baseline comparison, and evaluation tooling."""

from .torus import (
    FrequencyTable,
    TorusOperator,
    apply_transform,
    build_frequency_table,
    frequency_table_auto,
    rotate_coeffs,
    wrap_angles,
)
from .posterior import (
    PosteriorGrid,
    TorusPrior,
    expected_rotation,
    log_likelihood,
    map_estimate,
    natural_params,
    posterior_grid,
    posterior_natural_params,
)
from .inference import (
    code_gradient,
    fista_step_size,
    infer_code,
    infer_code_batch,
    prox_exponential,
)
from .stiefel import (
    StiefelAdamState,
    phi_update,
    retract,
    riemannian_adam_step,
    tangent_project,
)
from .training import (
    BaselineState,
    ModelParams,
    TrainConfig,
    baseline_model_params,
    basis_gradient,
    dictionary_gradient,
    init_model,
    train,
    train_baseline,
)
from .datasets import (
    Dataset,
    TransformSpec,
    load_idx_images,
    load_idx_labels,
    make_synthetic,
    normalize_batch,
    warp_rot_scale,
    warp_translate,
)
from .evaluate import (
    Reconstruction,
    export_grid,
    latent_traversal,
    reconstruct,
    reconstruct_batch,
    snr,
)
from .io import (
    CheckpointError,
    ConfigError,
    load_checkpoint,
    load_checkpoint_full,
    parse_config,
    save_checkpoint,
)

__all__ = [name for name in dir() if not name.startswith("_")]
