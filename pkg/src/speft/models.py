"""Small trainable models whose layered weights serve as the frozen base.

Three architectures: an MLP (regression or classification), a transformer
encoder classifier, and a causal transformer language model. Every 2-D
non-embedding weight matrix is "adaptable" (eligible for sparse or low-rank
adapters); biases, embeddings, and normalization parameters never are.

Forward passes accept an optional ``weights`` mapping that overrides named
parameters with substitute tensors. Adapters use this to inject their
reparameterized weights without touching the base.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from speft import autodiff as ad
from speft import fileio
from speft.autodiff import Tensor

_ACTIVATIONS = {"relu": ad.relu, "gelu": ad.gelu, "tanh": ad.tanh}

ARCHITECTURES = ("mlp", "transformer-encoder", "transformer-lm")


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    architecture: str = "mlp"
    # MLP fields
    widths: tuple = (4, 8, 2)
    activation: str = "gelu"
    task: str = "regression"  # mlp only: regression | classification
    # transformer fields
    width: int = 32
    depth: int = 1
    heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 64
    max_seq_len: int = 32
    n_classes: int = 2
    seed: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ModelConfigError(f"unknown architecture {self.architecture!r}")
        if self.activation not in _ACTIVATIONS:
            raise ModelConfigError(f"unknown activation {self.activation!r}")
        if self.dtype not in ("float64", "float32"):
            raise ModelConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.architecture == "mlp":
            if len(self.widths) < 2 or any(w < 1 for w in self.widths):
                raise ModelConfigError(f"mlp widths must be >= 2 positive entries, got {self.widths}")
            if self.task not in ("regression", "classification"):
                raise ModelConfigError(f"mlp task must be regression or classification, got {self.task!r}")
        else:
            for name in ("width", "depth", "heads", "mlp_ratio", "vocab_size", "max_seq_len"):
                if getattr(self, name) < 1:
                    raise ModelConfigError(f"{name} must be positive")
            if self.width % self.heads != 0:
                raise ModelConfigError(f"heads ({self.heads}) must divide width ({self.width})")
            if self.architecture == "transformer-encoder" and self.n_classes < 2:
                raise ModelConfigError("n_classes must be >= 2")

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "widths": list(self.widths),
            "activation": self.activation,
            "task": self.task,
            "width": self.width,
            "depth": self.depth,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        cfg.widths = tuple(cfg.widths)
        return cfg


@dataclass
class Param:
    name: str
    tensor: Tensor
    kind: str  # weight | bias | embedding | norm
    frozen: bool = True

    @property
    def adaptable(self) -> bool:
        return self.kind == "weight"


class ParamSet:
    """Ordered, named parameter collection with stable iteration order."""

    def __init__(self, params: Sequence[Param]):
        self._params = list(params)
        self._by_name = {p.name: p for p in self._params}
        if len(self._by_name) != len(self._params):
            raise ModelConfigError("duplicate parameter names")

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> Param:
        return self._by_name[name]

    def names(self) -> list[str]:
        return [p.name for p in self._params]

    def adaptable_params(self, name_filter: str | None = None) -> list[Param]:
        out = [p for p in self._params if p.adaptable]
        if name_filter is not None:
            out = [p for p in out if fnmatch.fnmatch(p.name, name_filter)]
        return out

    def total_count(self) -> int:
        return sum(p.tensor.size for p in self._params)

    def adaptable_count(self, name_filter: str | None = None) -> int:
        return sum(p.tensor.size for p in self.adaptable_params(name_filter))

    def arrays(self) -> dict[str, np.ndarray]:
        """Live views of the parameter arrays (not copies)."""
        return {p.name: p.tensor.data for p in self._params}

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.tensor.data.copy() for p in self._params}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for p in self._params:
            src = np.asarray(arrays[p.name], dtype=p.tensor.dtype)
            if src.shape != p.tensor.shape:
                raise ModelConfigError(
                    f"{p.name}: checkpoint shape {src.shape} != model shape {p.tensor.shape}"
                )
            p.tensor.data = src.copy()

    def zero_grad(self) -> None:
        for p in self._params:
            p.tensor.grad = None

    def set_frozen(self, frozen: bool, name_filter: str | None = None) -> None:
        for p in self._params:
            if name_filter is None or fnmatch.fnmatch(p.name, name_filter):
                p.frozen = frozen


class Model:
    """Base class: holds a config and ParamSet, computes batch-mean losses."""

    task_kind = "regression"

    def __init__(self, config: ModelConfig, params: ParamSet):
        self.config = config
        self.params = params

    def _w(self, name: str, weights: Mapping[str, Tensor] | None) -> Tensor:
        if weights is not None:
            override = weights.get(name)
            if override is not None:
                return override
        return self.params[name].tensor

    def loss(self, batch, weights: Mapping[str, Tensor] | None = None) -> Tensor:
        raise NotImplementedError

    def linear_chain(self) -> list[str]:
        """Adaptable weight names in execution order with chaining dimensions."""
        raise NotImplementedError

    def param_count(self) -> int:
        return self.params.total_count()

    @staticmethod
    def _check_batch(batch) -> None:
        inputs = np.asarray(batch.inputs)
        if inputs.shape[0] == 0:
            raise ValueError("empty batch")


def _activation(name: str):
    return _ACTIVATIONS[name]


class MLPModel(Model):
    def __init__(self, config: ModelConfig, params: ParamSet):
        super().__init__(config, params)
        self.task_kind = "classification" if config.task == "classification" else "regression"

    def outputs(self, x: np.ndarray, weights=None) -> Tensor:
        act = _activation(self.config.activation)
        widths = self.config.widths
        if x.ndim != 2 or x.shape[1] != widths[0]:
            raise ad.ShapeMismatchError("mlp_forward", x.shape, (0, widths[0]))
        h = Tensor(np.asarray(x, dtype=self.config.np_dtype()))
        n_layers = len(widths) - 1
        for i in range(n_layers):
            h = ad.matmul(h, self._w(f"fc{i}.weight", weights)) + self._w(f"fc{i}.bias", weights)
            if i < n_layers - 1:
                h = act(h)
        return h

    def loss(self, batch, weights=None) -> Tensor:
        self._check_batch(batch)
        out = self.outputs(np.asarray(batch.inputs), weights)
        if self.task_kind == "classification":
            return ad.cross_entropy(out, np.asarray(batch.targets))
        targets = np.asarray(batch.targets, dtype=self.config.np_dtype())
        if targets.ndim == 1:
            targets = targets.reshape(-1, 1)
        return ad.mse(out, targets)

    def predictions(self, batch, weights=None) -> np.ndarray:
        with ad.no_grad():
            out = self.outputs(np.asarray(batch.inputs), weights)
        if self.task_kind == "classification":
            return np.argmax(out.data, axis=-1)
        return out.data

    def linear_chain(self) -> list[str]:
        return [f"fc{i}.weight" for i in range(len(self.config.widths) - 1)]


class _TransformerBase(Model):
    def _encode(self, ids: np.ndarray, weights, causal: bool) -> Tensor:
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ad.ShapeMismatchError("transformer_forward", ids.shape, ("batch", "seq"))
        seq = ids.shape[1]
        if seq > cfg.max_seq_len:
            raise ValueError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        x = ad.embedding(self._w("embed.tok", weights), ids)
        x = x + ad.embedding(self._w("embed.pos", weights), np.arange(seq))
        mask = None
        if causal:
            m = np.zeros((seq, seq), dtype=cfg.np_dtype())
            m[np.triu_indices(seq, k=1)] = -1e9
            mask = Tensor(m)
        for b in range(cfg.depth):
            x = self._block(x, b, weights, mask)
        return ad.layer_norm(x, self._w("final_norm.gain", weights), self._w("final_norm.bias", weights))

    def _block(self, x: Tensor, b: int, weights, mask: Tensor | None) -> Tensor:
        p = f"block{b}"
        normed = ad.layer_norm(x, self._w(f"{p}.norm1.gain", weights), self._w(f"{p}.norm1.bias", weights))
        x = x + self._attention(normed, b, weights, mask)
        normed = ad.layer_norm(x, self._w(f"{p}.norm2.gain", weights), self._w(f"{p}.norm2.bias", weights))
        return x + self._mlp(normed, b, weights)

    def _attention(self, x: Tensor, b: int, weights, mask: Tensor | None) -> Tensor:
        cfg = self.config
        p = f"block{b}.attn"
        batch, seq, width = x.shape
        heads, head_dim = cfg.heads, cfg.width // cfg.heads

        def project(tag: str) -> Tensor:
            h = ad.matmul(x, self._w(f"{p}.{tag}.weight", weights)) + self._w(f"{p}.{tag}.bias", weights)
            h = ad.reshape(h, (batch, seq, heads, head_dim))
            return ad.transpose(h, (0, 2, 1, 3))

        q, k, v = project("q"), project("k"), project("v")
        scores = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(head_dim))
        if mask is not None:
            scores = scores + mask
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, seq, width))
        return ad.matmul(ctx, self._w(f"{p}.o.weight", weights)) + self._w(f"{p}.o.bias", weights)

    def _mlp(self, x: Tensor, b: int, weights) -> Tensor:
        p = f"block{b}.mlp"
        act = _activation(self.config.activation)
        h = act(ad.matmul(x, self._w(f"{p}.fc1.weight", weights)) + self._w(f"{p}.fc1.bias", weights))
        return ad.matmul(h, self._w(f"{p}.fc2.weight", weights)) + self._w(f"{p}.fc2.bias", weights)

    def linear_chain(self) -> list[str]:
        names = []
        for b in range(self.config.depth):
            names += [
                f"block{b}.attn.q.weight",
                f"block{b}.attn.k.weight",
                f"block{b}.attn.v.weight",
                f"block{b}.attn.o.weight",
                f"block{b}.mlp.fc1.weight",
                f"block{b}.mlp.fc2.weight",
            ]
        names.append("head.weight")
        return names


class TransformerEncoderModel(_TransformerBase):
    task_kind = "classification"

    def logits(self, ids: np.ndarray, weights=None) -> Tensor:
        x = self._encode(ids, weights, causal=False)
        pooled = ad.rmean(x, axis=1)
        return ad.matmul(pooled, self._w("head.weight", weights)) + self._w("head.bias", weights)

    def loss(self, batch, weights=None) -> Tensor:
        self._check_batch(batch)
        return ad.cross_entropy(self.logits(batch.inputs, weights), np.asarray(batch.targets))

    def predictions(self, batch, weights=None) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.logits(batch.inputs, weights).data, axis=-1)


class TransformerLMModel(_TransformerBase):
    task_kind = "lm"

    def logits(self, ids: np.ndarray, weights=None) -> Tensor:
        x = self._encode(ids, weights, causal=True)
        return ad.matmul(x, self._w("head.weight", weights)) + self._w("head.bias", weights)

    def loss(self, batch, weights=None) -> Tensor:
        self._check_batch(batch)
        inputs = np.asarray(batch.inputs)
        targets = np.asarray(batch.targets)
        if inputs.shape != targets.shape:
            raise ad.ShapeMismatchError("lm_loss", inputs.shape, targets.shape)
        logits = self.logits(inputs, weights)
        flat = ad.reshape(logits, (inputs.shape[0] * inputs.shape[1], self.config.vocab_size))
        return ad.cross_entropy(flat, targets.reshape(-1))


def _param_specs(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, kind) for every parameter, in construction order."""
    specs: list[tuple[str, tuple, str]] = []
    if config.architecture == "mlp":
        widths = config.widths
        for i in range(len(widths) - 1):
            specs.append((f"fc{i}.weight", (widths[i], widths[i + 1]), "weight"))
            specs.append((f"fc{i}.bias", (widths[i + 1],), "bias"))
        return specs

    d = config.width
    hidden = config.mlp_ratio * d
    specs.append(("embed.tok", (config.vocab_size, d), "embedding"))
    specs.append(("embed.pos", (config.max_seq_len, d), "embedding"))
    for b in range(config.depth):
        p = f"block{b}"
        specs.append((f"{p}.norm1.gain", (d,), "norm"))
        specs.append((f"{p}.norm1.bias", (d,), "norm"))
        for tag in ("q", "k", "v", "o"):
            specs.append((f"{p}.attn.{tag}.weight", (d, d), "weight"))
            specs.append((f"{p}.attn.{tag}.bias", (d,), "bias"))
        specs.append((f"{p}.norm2.gain", (d,), "norm"))
        specs.append((f"{p}.norm2.bias", (d,), "norm"))
        specs.append((f"{p}.mlp.fc1.weight", (d, hidden), "weight"))
        specs.append((f"{p}.mlp.fc1.bias", (hidden,), "bias"))
        specs.append((f"{p}.mlp.fc2.weight", (hidden, d), "weight"))
        specs.append((f"{p}.mlp.fc2.bias", (d,), "bias"))
    specs.append(("final_norm.gain", (d,), "norm"))
    specs.append(("final_norm.bias", (d,), "norm"))
    out_dim = config.vocab_size if config.architecture == "transformer-lm" else config.n_classes
    specs.append(("head.weight", (d, out_dim), "weight"))
    specs.append(("head.bias", (out_dim,), "bias"))
    return specs


INIT_STD = 0.02


def build_model(config: ModelConfig, seed: int | None = None) -> Model:
    """Construct a model with deterministic initialization from the seed.

    Matrices (weights and embeddings) draw from normal(0, 0.02); biases and
    norm shifts start at zero, norm gains at one.
    """
    config.validate()
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype()
    params = []
    for name, shape, kind in _param_specs(config):
        if kind in ("weight", "embedding"):
            data = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
        elif kind == "norm" and name.endswith(".gain"):
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params.append(Param(name, Tensor(data, requires_grad=True), kind))
    pset = ParamSet(params)
    cls = {
        "mlp": MLPModel,
        "transformer-encoder": TransformerEncoderModel,
        "transformer-lm": TransformerLMModel,
    }[config.architecture]
    model = cls(config, pset)
    model.build_seed = seed
    return model


# ---------------------------------------------------------------------------
# Low-rank adapter baseline: W = W0 + (alpha/r) * B @ A on adapted layers.
# ---------------------------------------------------------------------------

class LowRankAdapter:
    def __init__(self, model: Model, rank: int, alpha: float, name_filter: str | None, seed: int):
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.model = model
        self.rank = rank
        self.alpha = float(alpha)
        self.layers: dict[str, tuple[Tensor, Tensor]] = {}
        rng = np.random.default_rng(seed)
        dtype = model.config.np_dtype()
        for p in model.params.adaptable_params(name_filter):
            d1, d2 = p.tensor.shape
            if rank > min(d1, d2):
                raise ValueError(f"rank {rank} exceeds min dimension of {p.name} {p.tensor.shape}")
            b = Tensor(np.zeros((d1, rank), dtype=dtype), requires_grad=True)
            a = Tensor(rng.normal(0.0, INIT_STD, size=(rank, d2)).astype(dtype), requires_grad=True)
            self.layers[p.name] = (b, a)

    def weights_for_forward(self) -> dict[str, Tensor]:
        scale = self.alpha / self.rank
        out = {}
        for name, (b, a) in self.layers.items():
            base = self.model.params[name].tensor.detach()
            out[name] = base + ad.matmul(b, a) * scale
        return out

    def trainable_count(self) -> int:
        return sum(b.size + a.size for b, a in self.layers.values())

    def trainable_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, (b, a) in self.layers.items():
            out[f"{name}.lora_B"] = b
            out[f"{name}.lora_A"] = a
        return out


def apply_low_rank_adapter(
    model: Model,
    rank: int = 8,
    alpha: float | None = None,
    name_filter: str | None = None,
    seed: int = 0,
) -> LowRankAdapter:
    if alpha is None:
        alpha = float(rank)
    return LowRankAdapter(model, rank, alpha, name_filter, seed)


def lora_trainable_count(params: ParamSet, rank: int, name_filter: str | None = None) -> int:
    """Trainable parameters a rank-r adapter would add: sum of r*(d1+d2)."""
    return sum(rank * (p.tensor.shape[0] + p.tensor.shape[1]) for p in params.adaptable_params(name_filter))


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------

def save_model(path, model: Model) -> None:
    seed = getattr(model, "build_seed", model.config.seed)
    fileio.save_checkpoint(path, model.params.arrays(), model.config.to_dict(), seed)


def load_model(path) -> Model:
    arrays, config_dict, seed = fileio.load_checkpoint(path)
    config = ModelConfig.from_dict(config_dict)
    model = build_model(config, seed)
    model.params.load_arrays(arrays)
    return model
