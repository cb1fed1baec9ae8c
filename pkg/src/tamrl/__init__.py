"""Amortized task-aware modulation for few-shot regression (numpy implementation)."""
import os as _os

# TAMRL_THREADS caps BLAS worker threads; it has to be set before numpy loads
if _os.environ.get("TAMRL_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["TAMRL_THREADS"])
from .adaptation import (
    AdaptConfig,
    TaskModel,
    adapt,
    infer_modulated,
    predict_fomaml,
    predict_tamrl,
    run_variant,
    train_fomaml,
)
from .config import ExperimentConfig, read_manifest
from .errors import ConfigError, DataError, NumericError, ShapeError, TamrlError
from .modulation import (
    FilmSite,
    ModulatedBase,
    encode_task,
    export_embeddings,
    film_apply,
    generate_modulation,
    identity_sites,
    modulate_base,
)
from .networks import bilstm_encode, init_params, lstm_forward, lstm_step, mlp_backward, mlp_forward
from .numcore import AdamState, SeededRng, adam_step, finite_diff_grad, matmul, relative_error
from .synthetic import MODE_SETS, build_mode_set, eval_task, sample_episode, sample_task
from .training import MetaBatch, ModelState, Scaler, joint_train, pretrain, train_ensemble
from .windowing import (
    EntitySeries,
    ResultRow,
    ensemble_rmse,
    load_entity_csv,
    make_windows,
    read_results,
    rmse,
    split_support_query,
    write_results,
)

__version__ = "0.1.0"
