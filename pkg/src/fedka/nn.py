"""Minimal dense neural network engine.

Plain-numpy forward/backward for fully connected networks with optional
batch normalization on hidden layers, He-uniform initialization, and Adam.
All arithmetic is float64 and deterministic given explicit seeds, so
gradients can be checked tightly against finite differences and whole runs
are byte-reproducible.

Conventions:
  * a network is described by a :class:`NetworkSpec`; its parameters live in
    a flat name->array dict inside :class:`ModelParams`,
  * ``forward`` in eval mode is pure; in train mode it additionally updates
    the batch-norm running statistics in place (the only mutation here),
  * ``backward`` consumes the tape produced by the matching ``forward`` and
    returns gradients for every trainable parameter plus the input batch,
  * ``adam_step`` is functional: it returns fresh params and state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Gradients over the flat parameter store: name -> array.
ParamGrads = dict[str, np.ndarray]
ParamDelta = dict[str, np.ndarray]


class NonFiniteGradientError(ValueError):
    """An optimizer step received NaN or infinite gradient entries."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a dense network.

    ``layer_dims[0]`` is the input width and ``layer_dims[-1]`` the output
    width; every intermediate entry is a ReLU hidden layer. ``batchnorm``
    holds one flag per hidden layer. ``output`` is ``"linear"`` for feature
    encoders or ``"log_softmax"`` for classifiers emitting row-wise
    log-probabilities.
    """

    layer_dims: tuple[int, ...]
    batchnorm: tuple[bool, ...] = ()
    output: str = "linear"

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least input and output widths")
        if any(d <= 0 for d in dims):
            raise ValueError("layer dimensions must be positive")
        n_hidden = len(dims) - 2
        bn = tuple(bool(f) for f in self.batchnorm)
        if bn == ():
            bn = (False,) * n_hidden
        if len(bn) != n_hidden:
            raise ValueError(
                f"batchnorm has {len(bn)} flags for {n_hidden} hidden layers"
            )
        object.__setattr__(self, "batchnorm", bn)
        if self.output not in ("linear", "log_softmax"):
            raise ValueError(f"unknown output kind {self.output!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


def encoder_spec(in_dim: int, hidden: int, feature_dim: int) -> NetworkSpec:
    """Feature encoder: one batch-normalized ReLU hidden layer, linear output."""
    return NetworkSpec((in_dim, hidden, feature_dim), (True,), "linear")


def classifier_spec(in_dim: int, hidden: int, n_classes: int) -> NetworkSpec:
    """Classifier head: batch-normalized hidden layer, log-softmax output."""
    return NetworkSpec((in_dim, hidden, n_classes), (True,), "log_softmax")


@dataclass
class ModelParams:
    """Flat parameter store for one network.

    Keys: ``w{i}``/``b{i}`` per layer; for batch-normalized hidden layers
    additionally ``bn{i}_scale``, ``bn{i}_shift`` (trainable) and
    ``bn{i}_mean``, ``bn{i}_var`` (running statistics, not trainable).
    """

    spec: NetworkSpec
    values: dict[str, np.ndarray]


def trainable_keys(spec: NetworkSpec) -> list[str]:
    keys = []
    for i in range(spec.n_layers):
        keys.append(f"w{i}")
        keys.append(f"b{i}")
        if i < spec.n_layers - 1 and spec.batchnorm[i]:
            keys.append(f"bn{i}_scale")
            keys.append(f"bn{i}_shift")
    return keys


def init_network(spec: NetworkSpec, seed: int) -> ModelParams:
    """He-uniform weights in [-sqrt(6/fan_in), sqrt(6/fan_in)], zero biases,
    identity batch-norm (scale 1, shift 0, running mean 0, running var 1)."""
    rng = np.random.default_rng(seed)
    values: dict[str, np.ndarray] = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        bound = np.sqrt(6.0 / fan_in)
        values[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        values[f"b{i}"] = np.zeros(fan_out)
        if i < spec.n_layers - 1 and spec.batchnorm[i]:
            values[f"bn{i}_scale"] = np.ones(fan_out)
            values[f"bn{i}_shift"] = np.zeros(fan_out)
            values[f"bn{i}_mean"] = np.zeros(fan_out)
            values[f"bn{i}_var"] = np.ones(fan_out)
    return ModelParams(spec, values)


@dataclass
class ForwardTape:
    """Per-layer caches from one forward pass; feed to :func:`backward`.

    Only valid for the parameters and batch that produced it.
    """

    mode: str
    x: np.ndarray
    layers: list[dict[str, np.ndarray]]
    out: np.ndarray


def forward(
    params: ModelParams, batch: np.ndarray, mode: str = "eval"
) -> tuple[np.ndarray, ForwardTape]:
    """Run the network on a batch (rows = samples).

    Eval mode normalizes with running statistics and mutates nothing. Train
    mode normalizes with batch statistics and folds them into the running
    averages with momentum ``BN_MOMENTUM`` (in place); it requires a batch
    of at least 2 rows when batch norm is present.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    spec = params.spec
    x = np.ascontiguousarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(
            f"batch of shape {x.shape} does not match input width {spec.in_dim}"
        )
    v = params.values
    n = x.shape[0]
    a = x
    layers: list[dict[str, np.ndarray]] = []
    for i in range(spec.n_layers - 1):
        z = a @ v[f"w{i}"] + v[f"b{i}"]
        cache: dict[str, np.ndarray] = {"a_in": a}
        if spec.batchnorm[i]:
            if mode == "train":
                if n < 2:
                    raise ValueError(
                        "train-mode batch norm needs a batch of at least 2 samples"
                    )
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                v[f"bn{i}_mean"][:] = (1 - BN_MOMENTUM) * v[f"bn{i}_mean"] + BN_MOMENTUM * mu
                # unbiased estimate feeds the running average
                v[f"bn{i}_var"][:] = (1 - BN_MOMENTUM) * v[f"bn{i}_var"] + BN_MOMENTUM * (
                    var * n / (n - 1)
                )
            else:
                mu = v[f"bn{i}_mean"]
                var = v[f"bn{i}_var"]
            istd = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * istd
            zn = v[f"bn{i}_scale"] * zhat + v[f"bn{i}_shift"]
            cache["zhat"] = zhat
            cache["istd"] = istd
        else:
            zn = z
        cache["relu_mask"] = zn > 0.0
        layers.append(cache)
        a = np.maximum(zn, 0.0)
    i = spec.n_layers - 1
    z = a @ v[f"w{i}"] + v[f"b{i}"]
    cache = {"a_in": a}
    if spec.output == "log_softmax":
        zmax = z.max(axis=1, keepdims=True)
        out = z - (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))
        cache["softmax"] = np.exp(out)
    else:
        out = z
    layers.append(cache)
    return out, ForwardTape(mode=mode, x=x, layers=layers, out=out)


def backward(
    params: ModelParams, tape: ForwardTape, output_grad: np.ndarray
) -> tuple[ParamGrads, np.ndarray]:
    """Reverse-mode pass: gradients of a scalar loss whose output-gradient is
    ``output_grad``, w.r.t. every trainable parameter and the input batch."""
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != tape.out.shape:
        raise ValueError(
            f"stale tape: output_grad shape {g.shape} does not match {tape.out.shape}"
        )
    spec = params.spec
    v = params.values
    L = spec.n_layers
    grads: ParamGrads = {}
    last = tape.layers[L - 1]
    if spec.output == "log_softmax":
        p = last["softmax"]
        gz = g - p * g.sum(axis=1, keepdims=True)
    else:
        gz = g
    grads[f"w{L-1}"] = last["a_in"].T @ gz
    grads[f"b{L-1}"] = gz.sum(axis=0)
    ga = gz @ v[f"w{L-1}"].T
    for i in range(L - 2, -1, -1):
        cache = tape.layers[i]
        gzn = ga * cache["relu_mask"]
        if spec.batchnorm[i]:
            zhat, istd = cache["zhat"], cache["istd"]
            grads[f"bn{i}_scale"] = (gzn * zhat).sum(axis=0)
            grads[f"bn{i}_shift"] = gzn.sum(axis=0)
            gzhat = gzn * v[f"bn{i}_scale"]
            if tape.mode == "train":
                n = zhat.shape[0]
                gz = (istd / n) * (
                    n * gzhat - gzhat.sum(axis=0) - zhat * (gzhat * zhat).sum(axis=0)
                )
            else:
                gz = gzhat * istd
        else:
            gz = gzn
        grads[f"w{i}"] = cache["a_in"].T @ gz
        grads[f"b{i}"] = gz.sum(axis=0)
        ga = gz @ v[f"w{i}"].T
    return grads, ga


@dataclass
class AdamState:
    """First/second-moment accumulators for the trainable parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: ModelParams) -> AdamState:
    keys = trainable_keys(params.spec)
    return AdamState(
        m={k: np.zeros_like(params.values[k]) for k in keys},
        v={k: np.zeros_like(params.values[k]) for k in keys},
        t=0,
    )


def adam_step(
    params: ModelParams, grads: ParamGrads, state: AdamState, lr: float
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam step; rejects non-finite gradients."""
    keys = trainable_keys(params.spec)
    for k in keys:
        if grads[k].shape != params.values[k].shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteGradientError(f"non-finite gradient entries in {k!r}")
    t = state.t + 1
    new_values = {k: a.copy() for k, a in params.values.items()}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for k in keys:
        g = grads[k]
        m = ADAM_BETA1 * state.m[k] + (1 - ADAM_BETA1) * g
        v2 = ADAM_BETA2 * state.v[k] + (1 - ADAM_BETA2) * g * g
        new_values[k] -= lr * (m / bc1) / (np.sqrt(v2 / bc2) + ADAM_EPS)
        new_m[k] = m
        new_v[k] = v2
    return ModelParams(params.spec, new_values), AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# parameter-tree utilities

def params_clone(params: ModelParams) -> ModelParams:
    return ModelParams(params.spec, {k: a.copy() for k, a in params.values.items()})


def params_delta(new: ModelParams, base: ModelParams) -> ParamDelta:
    """new - base over every entry, running statistics included."""
    if new.spec != base.spec:
        raise ValueError("parameter specs differ")
    return {k: new.values[k] - base.values[k] for k in base.values}


def params_apply_delta(
    params: ModelParams, delta: ParamDelta, scale: float = 1.0
) -> ModelParams:
    if set(delta) != set(params.values):
        raise ValueError("delta keys do not match parameters")
    return ModelParams(
        params.spec, {k: params.values[k] + scale * delta[k] for k in params.values}
    )


def params_allfinite(params: ModelParams) -> bool:
    return all(np.all(np.isfinite(a)) for a in params.values.values())


# ---------------------------------------------------------------------------
# encoder + classifier pairs (the unit shipped between server and clients)

@dataclass
class EncoderClassifier:
    """A full model: feature encoder followed by a classifier head."""

    encoder: ModelParams
    classifier: ModelParams


@dataclass
class ModelDelta:
    """Parameter-space difference of two :class:`EncoderClassifier` values."""

    encoder: ParamDelta
    classifier: ParamDelta


def model_clone(model: EncoderClassifier) -> EncoderClassifier:
    return EncoderClassifier(params_clone(model.encoder), params_clone(model.classifier))


def model_delta(new: EncoderClassifier, base: EncoderClassifier) -> ModelDelta:
    return ModelDelta(
        encoder=params_delta(new.encoder, base.encoder),
        classifier=params_delta(new.classifier, base.classifier),
    )


def model_apply_delta(
    model: EncoderClassifier, delta: ModelDelta, scale: float = 1.0
) -> EncoderClassifier:
    return EncoderClassifier(
        encoder=params_apply_delta(model.encoder, delta.encoder, scale),
        classifier=params_apply_delta(model.classifier, delta.classifier, scale),
    )


def predict_log_probs(model: EncoderClassifier, x: np.ndarray) -> np.ndarray:
    """Eval-mode log-probabilities for a batch; pure."""
    h, _ = forward(model.encoder, x, "eval")
    lp, _ = forward(model.classifier, h, "eval")
    return lp


def predict_labels(model: EncoderClassifier, x: np.ndarray) -> np.ndarray:
    """Eval-mode argmax predictions; ties resolve to the lowest class index."""
    return np.argmax(predict_log_probs(model, x), axis=1)


# ---------------------------------------------------------------------------
# persistence

def _spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "layer_dims": list(spec.layer_dims),
        "batchnorm": list(spec.batchnorm),
        "output": spec.output,
    }


def _spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(tuple(d["layer_dims"]), tuple(d["batchnorm"]), d["output"])


def save_model(model: EncoderClassifier, path) -> None:
    meta = json.dumps(
        {
            "encoder": _spec_to_dict(model.encoder.spec),
            "classifier": _spec_to_dict(model.classifier.spec),
        },
        sort_keys=True,
    )
    arrays = {f"enc/{k}": a for k, a in model.encoder.values.items()}
    arrays.update({f"cls/{k}": a for k, a in model.classifier.values.items()})
    np.savez(path, __meta__=np.array(meta), **arrays)


def load_model(path) -> EncoderClassifier:
    with np.load(path) as data:
        meta = json.loads(str(data["__meta__"]))
        enc = ModelParams(
            _spec_from_dict(meta["encoder"]),
            {k[4:]: data[k].copy() for k in data.files if k.startswith("enc/")},
        )
        cls = ModelParams(
            _spec_from_dict(meta["classifier"]),
            {k[4:]: data[k].copy() for k in data.files if k.startswith("cls/")},
        )
    return EncoderClassifier(enc, cls)


def params_digest(params: ModelParams) -> str:
    """Hex digest of the parameter bytes; order-canonical over keys."""
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params.values):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.values[k]).tobytes())
    return h.hexdigest()


def model_digest(model: EncoderClassifier) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(params_digest(model.encoder).encode())
    h.update(params_digest(model.classifier).encode())
    return h.hexdigest()
