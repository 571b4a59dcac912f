"""Sparse parameter-efficient fine-tuning on small neural models.

The package trains a sparse delta over frozen pretrained weights: salience
metrics score every weight, a top-rho mask picks the trainable coordinates,
and the trainer updates only those entries. A low-rank adapter and full
fine-tuning share the same loop for matched comparisons.

Typical use:

    from speft import data, models, trainer

    ds = data.gen_teacher_student((16, 32, 1), teacher_seed=1, noise_sigma=0.01, n_examples=2000)
    model = models.build_model(models.ModelConfig(architecture="mlp", widths=(16, 32, 1)))
    cfg = trainer.TrainConfig(method="speft", metric="gradient", rho=0.05, steps=1000)
    result = trainer.run(cfg, model, ds)
"""

from speft.autodiff import Tensor, backward, grad_of, hessian_vector_product, no_grad
from speft.masking import MaskSchedule, SparsityMask, build_global_mask, build_local_mask
from speft.models import ModelConfig, ParamSet, apply_low_rank_adapter, build_model
from speft.salience import SalienceConfig, SalienceScores, compute_salience
from speft.trainer import TrainConfig, evaluate, overhead_report, parity_density, run

__all__ = [
    "Tensor",
    "backward",
    "grad_of",
    "no_grad",
    "hessian_vector_product",
    "SparsityMask",
    "MaskSchedule",
    "build_global_mask",
    "build_local_mask",
    "ModelConfig",
    "ParamSet",
    "build_model",
    "apply_low_rank_adapter",
    "SalienceConfig",
    "SalienceScores",
    "compute_salience",
    "TrainConfig",
    "run",
    "evaluate",
    "overhead_report",
    "parity_density",
]
__version__ = "0.1.0"
