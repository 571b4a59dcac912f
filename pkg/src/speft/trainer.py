"""Training loops: sparse fine-tuning plus low-rank and full baselines.

The sparse loop follows one fixed skeleton per step t = 1..T:

  1. if the mask should refresh (always at t=1; every I steps when dynamic):
     merge the current delta into the base, re-estimate salience, rebuild the
     top-rho mask, attach a fresh zero delta, and reinitialize the optimizer;
  2. sample a mini-batch and take the batch-mean loss;
  3. update only the masked sparse values.

Baselines reuse the identical skeleton, batch order, and optimizer so runs
with the same seed consume the same data regardless of method. Salience
estimation draws from a forked sampler and never advances the training
stream.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict
from typing import Callable, Mapping

import numpy as np

from speft import adapter as sparse
from speft import autodiff as ad
from speft import masking, models, salience
from speft.data import BatchSampler, Dataset
from speft.models import Model


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


METHODS = ("speft", "low_rank", "full_ft")


@dataclass
class TrainConfig:
    method: str = "speft"
    metric: str = "gradient"
    scope: str = "global"  # global | local
    rho: float | None = None
    interval: int = -1  # mask refresh interval; <= 0 means static
    steps: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    lr_schedule: str = "linear"  # linear | constant
    optimizer: str = "adamw"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 0  # 0 = final evaluation only
    est_batches: int = 64
    est_batch_size: int = 16
    gradient_reduction: str = "abs"
    hvp_method: str = "fd"
    name_filter: str | None = None
    lora_rank: int = 8
    lora_alpha: float | None = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.method == "speft":
            if self.rho is None:
                raise ConfigError("rho is required for the speft method")
            if not (0.0 < self.rho <= 1.0):
                raise ConfigError(f"rho must be in (0, 1], got {self.rho}")
            if self.metric not in salience.METRICS:
                raise ConfigError(f"unknown metric {self.metric!r}")
            if self.scope not in ("global", "local"):
                raise ConfigError(f"scope must be global or local, got {self.scope!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be adamw or sgd, got {self.optimizer!r}")
        if self.lr_schedule not in ("linear", "constant"):
            raise ConfigError(f"lr_schedule must be linear or constant, got {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class RunLog:
    """Chronological record of a run: one dict per step or event."""

    def __init__(self, config: TrainConfig | None = None):
        self.records: list[dict] = []
        self.wall_clock = {"salience": 0.0, "train": 0.0, "eval": 0.0}
        self.trainable_count = 0
        self.config = config

    def add(self, kind: str, **fields) -> None:
        self.records.append({"type": kind, **fields})

    def refresh_steps(self) -> list[int]:
        return [r["t"] for r in self.records if r["type"] == "refresh"]

    def step_losses(self) -> list[float]:
        return [r["loss"] for r in self.records if r["type"] == "step"]

    def final_eval(self) -> dict | None:
        evals = [r for r in self.records if r["type"] == "eval"]
        return evals[-1]["metrics"] if evals else None

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.write(
                json.dumps(
                    {
                        "type": "summary",
                        "wall_clock": self.wall_clock,
                        "trainable_count": self.trainable_count,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


@dataclass
class TrainResult:
    runlog: RunLog
    model: Model
    final_arrays: dict
    mask: masking.SparsityMask | None = None
    delta: sparse.SparseDelta | None = None
    lora: models.LowRankAdapter | None = None


def schedule_lr(config: TrainConfig, t: int) -> float:
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * (1.0 - (t - 1) / config.steps)


def _salience_seed(seed: int, refresh_index: int) -> int:
    # Forked stream: estimation never advances the training sampler, and each
    # refresh draws a fresh deterministic batch set.
    return (seed * 1_000_003 + 7919 * refresh_index + 13) % (2**31)


def evaluate(model: Model, dataset: Dataset, weights: Mapping | None = None) -> dict:
    """Deterministic eval metrics on the eval split; mutates nothing."""
    if dataset.eval_size == 0:
        raise ConfigError("evaluation requires a nonempty eval split")
    batch = dataset.eval_batch()
    with ad.no_grad():
        loss = model.loss(batch, weights).item()
    metrics = {"loss": loss}
    if model.task_kind == "classification":
        preds = model.predictions(batch, weights)
        metrics["accuracy"] = float(np.mean(preds == np.asarray(batch.targets)))
    elif model.task_kind == "lm":
        metrics["perplexity"] = float(np.exp(loss))
    return metrics


def _check_finite_loss(loss_value: float, t: int, lr: float) -> None:
    if not math.isfinite(loss_value):
        raise DivergenceError(f"non-finite loss {loss_value} at step {t} (lr={lr:g}); run aborted")


def run_speft(
    config: TrainConfig,
    model: Model,
    dataset: Dataset,
    on_event: Callable[[str, dict], None] | None = None,
) -> TrainResult:
    """Sparse fine-tuning: returns the run log and theta + W_sp."""
    config.validate()
    if config.method != "speft":
        raise ConfigError(f"run_speft called with method {config.method!r}")
    log = RunLog(config)
    schedule = masking.MaskSchedule(config.interval)
    sampler = BatchSampler(dataset.train_size, config.batch_size, seed=config.seed)
    state = sparse.OptimizerState(
        kind=config.optimizer,
        lr=config.lr,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    delta: sparse.SparseDelta | None = None
    mask: masking.SparsityMask | None = None
    refresh_index = 0
    last_epoch = 0

    def emit(name: str, **ctx) -> None:
        if on_event is not None:
            on_event(name, ctx)

    for t in range(1, config.steps + 1):
        if masking.should_refresh(t, schedule):
            started = time.perf_counter()
            emit("pre_merge", t=t, model=model, delta=delta)
            if delta is not None:
                sparse.merge_and_reset(delta)
            emit("post_merge", t=t, model=model, delta=delta)
            sal_config = salience.SalienceConfig(
                metric=config.metric,
                estimation_batches=config.est_batches,
                batch_size=config.est_batch_size,
                seed=_salience_seed(config.seed, refresh_index),
                gradient_reduction=config.gradient_reduction,
                hvp_method=config.hvp_method,
                name_filter=config.name_filter,
            )
            batches = None
            if config.metric not in salience.DATA_FREE_METRICS:
                batches = salience.estimation_batches(dataset, sal_config)
            scores = salience.compute_salience(model, sal_config, batches)
            build = masking.build_global_mask if config.scope == "global" else masking.build_local_mask
            new_mask = build(scores.flat(), config.rho, step=t, metric=config.metric)
            overlap = None
            if mask is not None:
                overlap = masking.mask_diff(mask, new_mask).overlap
            mask = new_mask
            delta = sparse.attach(mask, model.params)
            state.reinitialize(delta.values)
            log.trainable_count = delta.nnz
            log.wall_clock["salience"] += time.perf_counter() - started
            log.add("refresh", t=t, nnz=delta.nnz, overlap=overlap, refresh_index=refresh_index)
            refresh_index += 1
            emit("post_attach", t=t, model=model, delta=delta, mask=mask, state=state)

        started = time.perf_counter()
        batch_idx = sampler.next_batch()
        if sampler.epoch != last_epoch:
            last_epoch = sampler.epoch
            log.add("epoch", t=t, epoch=last_epoch)
        batch = dataset.train_batch(batch_idx)
        weights = delta.weights_for_forward()
        model.params.zero_grad()
        loss = model.loss(batch, weights)
        loss_value = loss.item()
        _check_finite_loss(loss_value, t, state.lr)
        ad.backward(loss)
        grads = {
            name: sparse.masked_gradient(weights[name].grad.data, delta.indices[name])
            for name in delta.indices
            if weights[name].grad is not None
        }
        state.lr = schedule_lr(config, t)
        sparse.step(delta, grads, state)
        log.wall_clock["train"] += time.perf_counter() - started
        log.add("step", t=t, loss=loss_value, lr=state.lr)

        if config.eval_every and t % config.eval_every == 0:
            started = time.perf_counter()
            metrics = evaluate(model, dataset, delta.weights_for_forward())
            log.wall_clock["eval"] += time.perf_counter() - started
            log.add("eval", t=t, metrics=metrics)

    started = time.perf_counter()
    final_metrics = evaluate(model, dataset, delta.weights_for_forward())
    log.wall_clock["eval"] += time.perf_counter() - started
    log.add("eval", t=config.steps, metrics=final_metrics, final=True)
    return TrainResult(
        runlog=log,
        model=model,
        final_arrays=sparse.merged_arrays(model.params, delta),
        mask=mask,
        delta=delta,
    )


def run_baseline(config: TrainConfig, model: Model, dataset: Dataset) -> TrainResult:
    """Low-rank adapter or full fine-tuning with the identical loop skeleton."""
    config.validate()
    if config.method == "speft":
        raise ConfigError("run_baseline handles low_rank and full_ft only")
    log = RunLog(config)
    sampler = BatchSampler(dataset.train_size, config.batch_size, seed=config.seed)
    last_epoch = 0

    lora = None
    if config.method == "low_rank":
        lora = models.apply_low_rank_adapter(
            model,
            rank=config.lora_rank,
            alpha=config.lora_alpha,
            name_filter=config.name_filter,
            seed=config.seed,
        )
        trainable = lora.trainable_tensors()
    else:
        model.params.set_frozen(False)
        trainable = {p.name: p.tensor for p in model.params}
    log.trainable_count = sum(t.size for t in trainable.values())

    opt = sparse.DenseOptimizer(
        trainable,
        kind=config.optimizer,
        lr=config.lr,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )

    for t in range(1, config.steps + 1):
        started = time.perf_counter()
        batch_idx = sampler.next_batch()
        if sampler.epoch != last_epoch:
            last_epoch = sampler.epoch
            log.add("epoch", t=t, epoch=last_epoch)
        batch = dataset.train_batch(batch_idx)
        for tensor in trainable.values():
            tensor.grad = None
        model.params.zero_grad()
        weights = lora.weights_for_forward() if lora is not None else None
        loss = model.loss(batch, weights)
        loss_value = loss.item()
        _check_finite_loss(loss_value, t, opt.state.lr)
        ad.backward(loss)
        grads = {
            name: tensor.grad.data for name, tensor in trainable.items() if tensor.grad is not None
        }
        opt.state.lr = schedule_lr(config, t)
        opt.step(grads)
        log.wall_clock["train"] += time.perf_counter() - started
        log.add("step", t=t, loss=loss_value, lr=opt.state.lr)

        if config.eval_every and t % config.eval_every == 0:
            started = time.perf_counter()
            metrics = evaluate(model, dataset, lora.weights_for_forward() if lora else None)
            log.wall_clock["eval"] += time.perf_counter() - started
            log.add("eval", t=t, metrics=metrics)

    started = time.perf_counter()
    final_metrics = evaluate(model, dataset, lora.weights_for_forward() if lora else None)
    log.wall_clock["eval"] += time.perf_counter() - started
    log.add("eval", t=config.steps, metrics=final_metrics, final=True)

    if lora is not None:
        final_arrays = model.params.copy_arrays()
        with ad.no_grad():
            for name, eff in lora.weights_for_forward().items():
                final_arrays[name] = eff.data.copy()
    else:
        final_arrays = model.params.copy_arrays()
    return TrainResult(runlog=log, model=model, final_arrays=final_arrays, lora=lora)


def run(config: TrainConfig, model: Model, dataset: Dataset) -> TrainResult:
    if config.method == "speft":
        return run_speft(config, model, dataset)
    return run_baseline(config, model, dataset)


# ---------------------------------------------------------------------------
# Budget parity and overhead accounting.
# ---------------------------------------------------------------------------

def parity_density(params: models.ParamSet, rank: int, name_filter: str | None = None) -> float:
    """The density rho at which a global sparse budget matches a rank-r
    low-rank adapter's trainable count (within one parameter)."""
    lora_count = models.lora_trainable_count(params, rank, name_filter)
    n = params.adaptable_count(name_filter)
    if lora_count > n:
        raise ConfigError(
            f"rank {rank} needs {lora_count} trainable parameters but only {n} adaptable exist"
        )
    rho = min((lora_count + 0.5) / n, 1.0)
    got = masking.budget(rho, n)
    if abs(got - lora_count) > 1:
        raise ConfigError(f"parity search failed: budget {got} vs low-rank {lora_count}")
    return rho


def planned_refreshes(config: TrainConfig) -> int:
    """Refresh count used for overhead planning: 1 when static, else ceil(T/I)."""
    if config.interval <= 0:
        return 1
    return math.ceil(config.steps / config.interval)


def overhead_report(config: TrainConfig, model: Model) -> dict:
    """Salience-estimation cost as a fraction of total training compute, the
    gradient-evaluation multiplier of the metric, and adapter index-storage
    bytes as a fraction of dense model bytes."""
    config.validate()
    refreshes = planned_refreshes(config)
    data_free = config.metric in salience.DATA_FREE_METRICS
    est_steps = 0 if data_free else refreshes * config.est_batches
    if config.metric in salience.SECOND_ORDER_METRICS:
        multiplier = 2.0
    elif data_free:
        multiplier = 0.0
    else:
        multiplier = 1.0

    report = {
        "method": config.method,
        "metric": config.metric,
        "train_steps": config.steps,
        "refreshes": refreshes,
        "estimation_steps": est_steps,
        "estimation_fraction": est_steps / (est_steps + config.steps),
        "gradient_eval_multiplier": multiplier,
        "gradient_evaluations": int(est_steps * multiplier),
    }

    params = model.params
    total_params = params.total_count()
    dtype_bytes = params.arrays()[next(iter(params.names()))].dtype.itemsize
    dense_bytes = total_params * dtype_bytes
    report["total_params"] = total_params
    report["dense_model_bytes"] = dense_bytes

    if config.method == "speft" and config.rho is not None:
        n_adapt = params.adaptable_count(config.name_filter)
        if config.scope == "global":
            nnz = masking.budget(config.rho, n_adapt)
        else:
            nnz = sum(
                masking.budget(config.rho, p.tensor.size)
                for p in params.adaptable_params(config.name_filter)
            )
        max_layer = max(p.tensor.size for p in params.adaptable_params(config.name_filter))
        idx_bytes = 4 if max_layer < 2**31 else 8
        report["trainable_count"] = nnz
        report["index_bytes"] = nnz * idx_bytes
        report["index_overhead_fraction"] = (nnz * idx_bytes) / dense_bytes
    elif config.method == "low_rank":
        report["trainable_count"] = models.lora_trainable_count(
            params, config.lora_rank, config.name_filter
        )
    else:
        report["trainable_count"] = total_params
    return report
