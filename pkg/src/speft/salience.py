"""Per-weight salience metrics used to choose trainable coordinates.

Eight metrics from the pruning-at-initialization family, scored over the
adaptable weights of a model:

  magnitude   |theta|                                  (data-free)
  gradient    |mean_b d(loss)/d(theta)|                (abs by default, raw optional)
  snip        |gbar * theta|
  force       -(gbar * theta)                          (signed)
  taylor_fo   (gbar * theta)^2
  synflow     d/dtheta[ 1^T (prod_l |W_l|) 1 ] * theta (data-free)
  grasp       -(H gbar) * theta                        (signed, second-order)
  fisher      mean_b (g_b)^2                           (square before averaging)

plus a seeded "random" metric used as a uniform-mask baseline. Data-aware
metrics average gradients over sampled estimation batches (default 64 batches
of 16) before the elementwise transform; gbar denotes that averaged gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from speft import autodiff as ad
from speft import fileio
from speft.autodiff import Tensor
from speft.data import Batch, BatchSampler, Dataset
from speft.models import Model

METRICS = ("magnitude", "gradient", "snip", "force", "taylor_fo", "synflow", "grasp", "fisher", "random")
DATA_FREE_METRICS = ("magnitude", "synflow", "random")
SECOND_ORDER_METRICS = ("grasp", "fisher")


class SalienceError(Exception):
    pass


@dataclass
class SalienceConfig:
    metric: str = "gradient"
    estimation_batches: int = 64
    batch_size: int = 16
    seed: int = 0
    gradient_reduction: str = "abs"  # abs | raw (gradient metric only)
    transform_stage: str = "average_first"  # average_first | transform_first
    fisher_granularity: str = "batch"  # batch | sample
    hvp_method: str = "fd"  # fd | exact (grasp only)
    name_filter: str | None = None

    def validate(self) -> None:
        if self.metric not in METRICS:
            raise SalienceError(f"unknown metric {self.metric!r}; valid metrics: {', '.join(METRICS)}")
        if self.metric not in DATA_FREE_METRICS and self.estimation_batches < 1:
            raise SalienceError("estimation_batches must be >= 1 for data-aware metrics")
        if self.gradient_reduction not in ("abs", "raw"):
            raise SalienceError(f"gradient_reduction must be abs or raw, got {self.gradient_reduction!r}")
        if self.transform_stage not in ("average_first", "transform_first"):
            raise SalienceError(f"bad transform_stage {self.transform_stage!r}")
        if self.fisher_granularity not in ("batch", "sample"):
            raise SalienceError(f"bad fisher_granularity {self.fisher_granularity!r}")


@dataclass
class SalienceScores:
    metric: str
    layers: dict[str, np.ndarray]
    batches_used: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.layers.items():
            if not np.all(np.isfinite(arr)):
                raise SalienceError(f"non-finite scores in layer {name}")

    def flat(self) -> dict[str, np.ndarray]:
        return {n: a.reshape(-1) for n, a in self.layers.items()}


def _adaptable_names(model: Model, name_filter: str | None) -> list[str]:
    names = [p.name for p in model.params.adaptable_params(name_filter)]
    if not names:
        raise SalienceError("model has no adaptable weights matching the filter")
    return names


def _theta(model: Model, names: Sequence[str]) -> dict[str, np.ndarray]:
    return {n: model.params[n].tensor.data for n in names}


def batch_gradients(model: Model, batch: Batch, names: Sequence[str]) -> dict[str, np.ndarray]:
    """Gradient of the batch-mean loss w.r.t. the named weights."""
    tensors = [model.params[n].tensor for n in names]
    loss = model.loss(batch)
    grads = ad.grad_of(loss, tensors)
    return {n: g.data for n, g in zip(names, grads)}


def averaged_gradient(model: Model, batches: Sequence[Batch], names: Sequence[str]) -> dict[str, np.ndarray]:
    if not batches:
        raise SalienceError("data stream exhausted: no estimation batches available")
    total = {n: np.zeros_like(model.params[n].tensor.data) for n in names}
    for batch in batches:
        g = batch_gradients(model, batch, names)
        for n in names:
            total[n] += g[n]
    count = float(len(batches))
    return {n: total[n] / count for n in names}


# ---------------------------------------------------------------------------
# Individual metrics.
# ---------------------------------------------------------------------------

def magnitude_scores(theta: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {n: np.abs(a) for n, a in theta.items()}


def gradient_scores(gbar: Mapping[str, np.ndarray], reduction: str = "abs") -> dict[str, np.ndarray]:
    if reduction == "abs":
        return {n: np.abs(g) for n, g in gbar.items()}
    return {n: g.copy() for n, g in gbar.items()}


def snip_scores(gbar, theta) -> dict[str, np.ndarray]:
    return {n: np.abs(gbar[n] * theta[n]) for n in gbar}


def force_scores(gbar, theta) -> dict[str, np.ndarray]:
    return {n: -(gbar[n] * theta[n]) for n in gbar}


def taylor_fo_scores(gbar, theta) -> dict[str, np.ndarray]:
    return {n: (gbar[n] * theta[n]) ** 2 for n in gbar}


def fisher_scores(
    model: Model,
    batches: Sequence[Batch],
    names: Sequence[str],
    granularity: str = "batch",
) -> dict[str, np.ndarray]:
    """Mean of elementwise squared gradients (per batch or per sample)."""
    if not batches:
        raise SalienceError("data stream exhausted: no estimation batches available")
    total = {n: np.zeros_like(model.params[n].tensor.data) for n in names}
    count = 0
    for batch in batches:
        if granularity == "sample":
            for i in range(batch.inputs.shape[0]):
                g = batch_gradients(model, Batch(batch.inputs[i : i + 1], batch.targets[i : i + 1]), names)
                for n in names:
                    total[n] += g[n] ** 2
                count += 1
        else:
            g = batch_gradients(model, batch, names)
            for n in names:
                total[n] += g[n] ** 2
            count += 1
    return {n: total[n] / float(count) for n in names}


def synflow_scores(model: Model, names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Synaptic-flow scores from the model's ordered linear-chain view.

    An all-ones row vector is pushed through the absolute-valued chain
    weights (nonlinearities, normalization, and attention mixing replaced by
    identity), the scalar sum is differentiated, and the gradient is
    multiplied elementwise by the signed weights.
    """
    try:
        chain = model.linear_chain()
    except NotImplementedError as exc:
        raise SalienceError("model has no linear-chain view") from exc
    tensors = [model.params[n].tensor for n in chain]
    u = Tensor(np.ones((1, tensors[0].shape[0]), dtype=tensors[0].dtype))
    for name, w in zip(chain, tensors):
        if w.ndim != 2 or u.shape[1] != w.shape[0]:
            raise SalienceError(f"linear-chain view broken at {name}: {u.shape} @ {w.shape}")
        u = ad.matmul(u, ad.absolute(w))
    flow = ad.rsum(u)
    grads = ad.grad_of(flow, tensors)
    scores = {n: g.data * t.data for n, g, t in zip(chain, grads, tensors)}
    if names is not None:
        missing = [n for n in names if n not in scores]
        if missing:
            raise SalienceError(f"linear-chain view does not cover: {missing}")
        scores = {n: scores[n] for n in names}
    return scores


def grasp_scores(
    model: Model,
    batches: Sequence[Batch],
    names: Sequence[str],
    hvp_method: str = "fd",
) -> dict[str, np.ndarray]:
    """-(H gbar) * theta with the Hessian-vector product taken at the
    batch-averaged gradient of the estimation loss."""
    gbar = averaged_gradient(model, batches, names)
    theta = _theta(model, names)

    def loss_fn(leaves: Mapping[str, Tensor]) -> Tensor:
        total = None
        for batch in batches:
            term = model.loss(batch, weights=dict(leaves))
            total = term if total is None else ad.add(total, term)
        return ad.div(total, ad.Tensor(np.asarray(float(len(batches)))))

    hv = ad.hessian_vector_product(loss_fn, theta, gbar, method=hvp_method)
    return {n: -(hv[n] * theta[n]) for n in names}


def random_scores(theta: Mapping[str, np.ndarray], seed: int) -> dict[str, np.ndarray]:
    """Seeded uniform scores; a top-rho mask over these is a uniform-random mask."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xA5,)))
    return {n: rng.random(a.shape) for n, a in theta.items()}


# ---------------------------------------------------------------------------
# Dispatcher.
# ---------------------------------------------------------------------------

def estimation_batches(dataset: Dataset, config: SalienceConfig) -> list[Batch]:
    """Draw the estimation batches from a dedicated seeded sampler."""
    sampler = BatchSampler(dataset.train_size, config.batch_size, seed=config.seed)
    return [dataset.train_batch(sampler.next_batch()) for _ in range(config.estimation_batches)]


def compute_salience(
    model: Model,
    config: SalienceConfig,
    batches: Sequence[Batch] | None = None,
) -> SalienceScores:
    """Score the adaptable weights of ``model`` under ``config.metric``."""
    config.validate()
    names = _adaptable_names(model, config.name_filter)
    theta = _theta(model, names)
    metric = config.metric

    if metric in DATA_FREE_METRICS:
        used = 0
        if metric == "magnitude":
            layers = magnitude_scores(theta)
        elif metric == "synflow":
            layers = synflow_scores(model, names)
        else:
            layers = random_scores(theta, config.seed)
    else:
        if not batches:
            raise SalienceError(f"metric {metric!r} requires data")
        if len(batches) < config.estimation_batches:
            raise SalienceError(
                f"data stream exhausted: needed {config.estimation_batches} batches, got {len(batches)}"
            )
        batches = list(batches[: config.estimation_batches])
        used = len(batches)
        if metric == "fisher":
            layers = fisher_scores(model, batches, names, config.fisher_granularity)
        elif metric == "grasp":
            layers = grasp_scores(model, batches, names, config.hvp_method)
        else:
            if config.transform_stage == "average_first":
                gbar = averaged_gradient(model, batches, names)
                if metric == "gradient":
                    layers = gradient_scores(gbar, config.gradient_reduction)
                elif metric == "snip":
                    layers = snip_scores(gbar, theta)
                elif metric == "force":
                    layers = force_scores(gbar, theta)
                else:
                    layers = taylor_fo_scores(gbar, theta)
            else:
                layers = _transform_then_average(model, batches, names, theta, config)

    for n in names:
        if layers[n].shape != theta[n].shape:
            raise SalienceError(f"score shape mismatch for {n}")
    return SalienceScores(
        metric=metric,
        layers=layers,
        batches_used=used,
        seed=config.seed,
        meta={
            "gradient_reduction": config.gradient_reduction,
            "transform_stage": config.transform_stage,
            "fisher_granularity": config.fisher_granularity,
        },
    )


def _transform_then_average(model, batches, names, theta, config) -> dict[str, np.ndarray]:
    """Optional variant: apply the elementwise transform per batch, then average."""
    total = {n: np.zeros_like(theta[n]) for n in names}
    for batch in batches:
        g = batch_gradients(model, batch, names)
        for n in names:
            if config.metric == "gradient":
                term = np.abs(g[n]) if config.gradient_reduction == "abs" else g[n]
            elif config.metric == "snip":
                term = np.abs(g[n] * theta[n])
            elif config.metric == "force":
                term = -(g[n] * theta[n])
            else:
                term = (g[n] * theta[n]) ** 2
            total[n] += term
    return {n: total[n] / float(len(batches)) for n in names}


def save_scores(path, scores: SalienceScores) -> None:
    meta = {
        "metric": scores.metric,
        "batches": scores.batches_used,
        "seed": scores.seed,
        **scores.meta,
    }
    fileio.save_scores(path, scores.layers, meta)


def load_scores(path) -> SalienceScores:
    layers, meta = fileio.load_scores(path)
    return SalienceScores(
        metric=meta.get("metric", "unknown"),
        layers=layers,
        batches_used=meta.get("batches", 0),
        seed=meta.get("seed", 0),
        meta={k: v for k, v in meta.items() if k not in ("metric", "batches", "seed")},
    )
