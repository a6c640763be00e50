"""Five-layer MLP classifier written directly against numpy.

Each hidden block is affine -> batch-norm -> ReLU -> dropout; the output
layer is affine followed by softmax. Training uses softmax cross-entropy,
Adam and a step-decay learning-rate schedule.

Hidden affine layers carry no bias: the following batch-norm shift makes it
redundant and its gradient is identically zero.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
from collections.abc import Callable, Iterator
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .hscube import HsCube
from .preprocess import SampleSet
from .seeding import rng_for
from .transforms import FeatureTransform

__all__ = [
    "TrainConfig",
    "MlpModel",
    "build_model",
    "forward",
    "loss_and_grads",
    "adam_step",
    "init_moments",
    "lr_at",
    "train",
    "TrainResult",
    "EpochRecord",
    "Checkpoint",
    "predict_proba",
    "predict_pixels",
    "write_log_csv",
]

DEFAULT_HIDDEN = (256, 128, 64, 32)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr0: float = 1e-3
    decay_factor: float = 0.6
    # None -> decay after every tenth of the run
    decay_every: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.2
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        for name in ("epochs", "batch_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch normalisation")
        if self.decay_every is not None and self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if not self.lr0 > 0 or not 0 < self.decay_factor <= 1:
            raise ConfigError("lr0 must be positive and decay_factor in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam coefficients")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate for a zero-based ``epoch``: lr0 * decay^floor(epoch / (epochs/10))."""
    if config.decay_every is None:
        steps = (epoch * 10) // config.epochs
    else:
        steps = epoch // config.decay_every
    return config.lr0 * config.decay_factor**steps


class MlpModel:
    """Parameters, batch-norm buffers and input standardisation of the MLP.

    ``params`` holds the learnable arrays: ``W{i}`` for every affine layer,
    ``gamma{i}``/``beta{i}`` for each hidden block and ``b{L}`` for the output
    bias. ``buffers`` holds ``running_mean{i}``/``running_var{i}``.
    """

    def __init__(
        self,
        input_dim: int,
        n_classes: int,
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
        dropout: float = 0.2,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
        dtype: type = np.float32,
        rng: np.random.Generator | None = None,
    ) -> None:
        if input_dim < 1 or n_classes < 2:
            raise ConfigError(f"need input_dim >= 1 and n_classes >= 2, got {input_dim}, {n_classes}")
        if not 0 <= dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {dropout}")
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.dropout = float(dropout)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)
        self.dtype = np.dtype(dtype)
        self.training = False
        rng = rng if rng is not None else np.random.default_rng(0)

        dims = self.dims
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            bound = math.sqrt(1.0 / fan_in) if last else math.sqrt(6.0 / fan_in)
            self.params[f"W{i}"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype)
            if last:
                self.params[f"b{i}"] = np.zeros(fan_out, self.dtype)
            else:
                self.params[f"gamma{i}"] = np.ones(fan_out, self.dtype)
                self.params[f"beta{i}"] = np.zeros(fan_out, self.dtype)
                self.buffers[f"running_mean{i}"] = np.zeros(fan_out, self.dtype)
                self.buffers[f"running_var{i}"] = np.ones(fan_out, self.dtype)
        self.feature_mean = np.zeros(self.input_dim, self.dtype)
        self.feature_std = np.ones(self.input_dim, self.dtype)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.n_classes)

    @property
    def n_hidden(self) -> int:
        return len(self.hidden)

    def train_mode(self) -> MlpModel:
        self.training = True
        return self

    def eval_mode(self) -> MlpModel:
        self.training = False
        return self

    def set_feature_stats(self, features: np.ndarray) -> None:
        """Standardise inputs with per-dimension training mean/std (std 0 -> 1)."""
        f = np.asarray(features, dtype=np.float64)
        mean = f.mean(axis=0)
        std = f.std(axis=0)
        std[std == 0] = 1.0
        self.feature_mean = mean.astype(self.dtype)
        self.feature_std = std.astype(self.dtype)

    def architecture(self) -> dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "hidden": list(self.hidden),
            "dropout": self.dropout,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "dtype": self.dtype.name,
        }

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every stored array in checkpoint order."""
        yield from self.params.items()
        yield from self.buffers.items()
        yield "feature_mean", self.feature_mean
        yield "feature_std", self.feature_std

    def copy(self) -> MlpModel:
        return copy.deepcopy(self)


def build_model(input_dim: int, n_classes: int, config: TrainConfig, dtype: type = np.float32) -> MlpModel:
    """Fresh model initialised from the config's seed ("init" stream)."""
    return MlpModel(
        input_dim,
        n_classes,
        hidden=config.hidden,
        dropout=config.dropout,
        bn_momentum=config.bn_momentum,
        bn_eps=config.bn_eps,
        dtype=dtype,
        rng=rng_for(config.seed, "init"),
    )


@dataclass
class _Cache:
    inputs: list[np.ndarray] = field(default_factory=list)
    xhat: list[np.ndarray] = field(default_factory=list)
    inv_std: list[np.ndarray] = field(default_factory=list)
    pre_relu: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    batch_stats: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    last_input: np.ndarray | None = None


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(
    model: MlpModel,
    x: np.ndarray,
    training: bool,
    dropout_rng: np.random.Generator | None,
) -> tuple[np.ndarray, _Cache]:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DataError(f"expected input of shape (N, {model.input_dim}), got {x.shape}")
    if training and x.shape[0] < 2:
        raise DataError("batch normalisation needs at least 2 samples in training mode")
    dt = model.dtype
    h = (x.astype(dt, copy=False) - model.feature_mean) / model.feature_std
    cache = _Cache()
    p = model.params
    for i in range(model.n_hidden):
        cache.inputs.append(h)
        z = h @ p[f"W{i}"]
        if training:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            cache.batch_stats.append((mu, var))
        else:
            mu = model.buffers[f"running_mean{i}"]
            var = model.buffers[f"running_var{i}"]
        inv = (1.0 / np.sqrt(var + dt.type(model.bn_eps))).astype(dt)
        xhat = (z - mu) * inv
        y = p[f"gamma{i}"] * xhat + p[f"beta{i}"]
        cache.xhat.append(xhat)
        cache.inv_std.append(inv)
        cache.pre_relu.append(y)
        a = np.maximum(y, 0)
        if training and model.dropout > 0:
            if dropout_rng is None:
                raise ConfigError("training-mode forward with dropout needs a dropout_rng")
            keep = dropout_rng.random(a.shape) >= model.dropout
            mask = keep.astype(dt) / dt.type(1.0 - model.dropout)
            a = a * mask
            cache.masks.append(mask)
        else:
            cache.masks.append(None)
        h = a
    cache.last_input = h
    last = model.n_hidden
    logits = h @ p[f"W{last}"] + p[f"b{last}"]
    return logits, cache


def forward(
    model: MlpModel,
    x: np.ndarray,
    training: bool | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Class probabilities (N x C).

    ``training`` defaults to the model's mode. Eval mode is deterministic:
    dropout is off and batch-norm uses running statistics.
    """
    training = model.training if training is None else training
    logits, _ = _forward(model, x, training, dropout_rng)
    return _softmax(logits)


def loss_and_grads(
    model: MlpModel,
    x: np.ndarray,
    labels: np.ndarray,
    training: bool | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray], list[tuple[np.ndarray, np.ndarray]]]:
    """Mean softmax cross-entropy and its gradient for every learnable array.

    Returns ``(loss, grads, batch_stats)``; ``batch_stats`` are the per-layer
    batch (mean, var) in training mode, for the caller to fold into running
    statistics. The model itself is not modified.
    """
    training = model.training if training is None else training
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != np.shape(x)[0]:
        raise DataError(f"{labels.size} labels for {np.shape(x)[0]} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= model.n_classes):
        raise DataError(f"labels must lie in [0, {model.n_classes})")
    logits, cache = _forward(model, x, training, dropout_rng)
    n = labels.size
    dt = model.dtype
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))

    p = model.params
    grads: dict[str, np.ndarray] = {}
    dlogits = np.exp(shifted - log_z[:, None])
    dlogits[np.arange(n), labels] -= 1
    dlogits /= dt.type(n)
    last = model.n_hidden
    grads[f"W{last}"] = cache.last_input.T @ dlogits
    grads[f"b{last}"] = dlogits.sum(axis=0)
    dh = dlogits @ p[f"W{last}"].T
    for i in reversed(range(model.n_hidden)):
        if cache.masks[i] is not None:
            dh = dh * cache.masks[i]
        dy = dh * (cache.pre_relu[i] > 0)
        xhat = cache.xhat[i]
        grads[f"gamma{i}"] = (dy * xhat).sum(axis=0)
        grads[f"beta{i}"] = dy.sum(axis=0)
        dxhat = dy * p[f"gamma{i}"]
        if training:
            dz = (cache.inv_std[i] / dt.type(n)) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            dz = dxhat * cache.inv_std[i]
        grads[f"W{i}"] = cache.inputs[i].T @ dz
        if i:
            dh = dz @ p[f"W{i}"].T
    grads = {k: np.asarray(v, dtype=dt) for k, v in grads.items()}
    return loss, grads, cache.batch_stats


def _update_running_stats(model: MlpModel, batch_stats: list[tuple[np.ndarray, np.ndarray]], n: int) -> None:
    m = model.dtype.type(model.bn_momentum)
    unbias = model.dtype.type(n / (n - 1))
    for i, (mu, var) in enumerate(batch_stats):
        rm, rv = model.buffers[f"running_mean{i}"], model.buffers[f"running_var{i}"]
        rm *= 1 - m
        rm += m * mu
        rv *= 1 - m
        rv += m * var * unbias


def init_moments(params: dict[str, np.ndarray]) -> dict[str, dict[str, np.ndarray]]:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: dict[str, dict[str, np.ndarray]],
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], dict[str, dict[str, np.ndarray]]]:
    """One bias-corrected Adam update, applied in place to ``params`` and ``moments``."""
    if t < 1:
        raise ConfigError(f"Adam step counter must start at 1, got {t}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        param = params[name]
        dt = param.dtype.type
        m = moments["m"][name]
        v = moments["v"][name]
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * g * g
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        param -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
    return params, moments


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_oa: float


@dataclass(eq=False)
class Checkpoint:
    """Model snapshot plus everything needed to resume or to predict."""

    model: MlpModel
    config: TrainConfig
    epoch: int
    step: int = 0
    moments: dict[str, dict[str, np.ndarray]] | None = None
    transform: FeatureTransform | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def _tensors(self) -> list[tuple[str, np.ndarray]]:
        items = list(self.model.named_arrays())
        if self.moments is not None:
            for kind in ("m", "v"):
                items += [(f"adam.{kind}.{k}", v) for k, v in self.moments[kind].items()]
        return items

    def save(self, path: str | os.PathLike) -> Path:
        """Write ``<stem>.json`` manifest and ``<stem>.bin`` parameter blob."""
        stem = _ckpt_stem(path)
        stem.parent.mkdir(parents=True, exist_ok=True)
        blob_dtype = "<f4" if self.model.dtype == np.float32 else "<f8"
        layout, offset, chunks = [], 0, []
        for name, arr in self._tensors():
            a = np.ascontiguousarray(arr, dtype=blob_dtype)
            layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += a.size
            chunks.append(a.tobytes())
        blob_name = stem.name + ".bin"
        stem.with_name(blob_name).write_bytes(b"".join(chunks))
        manifest = {
            "format": "hsident-mlp-1",
            "architecture": self.model.architecture(),
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "transform": None if self.transform is None else self.transform.to_dict(),
            "metadata": self.metadata,
            "blob": blob_name,
            "dtype": "f32le" if blob_dtype == "<f4" else "f64le",
            "tensors": layout,
        }
        manifest_path = stem.with_name(stem.name + ".json")
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return manifest_path

    @classmethod
    def load(cls, path: str | os.PathLike) -> Checkpoint:
        stem = _ckpt_stem(path)
        manifest_path = stem.with_name(stem.name + ".json")
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"checkpoint manifest {manifest_path} not found") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed checkpoint manifest: {exc}") from exc
        if manifest.get("format") != "hsident-mlp-1":
            raise DataError(f"unrecognised checkpoint format {manifest.get('format')!r}")
        arch = manifest["architecture"]
        dtype = np.float32 if manifest["dtype"] == "f32le" else np.float64
        model = MlpModel(
            arch["input_dim"],
            arch["n_classes"],
            hidden=tuple(arch["hidden"]),
            dropout=arch["dropout"],
            bn_momentum=arch["bn_momentum"],
            bn_eps=arch["bn_eps"],
            dtype=dtype,
        )
        raw = np.frombuffer(
            (manifest_path.parent / manifest["blob"]).read_bytes(),
            dtype="<f4" if dtype == np.float32 else "<f8",
        )
        moments: dict[str, dict[str, np.ndarray]] = {}
        expected = {name for name, _ in model.named_arrays()}
        for entry in manifest["tensors"]:
            name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
            size = int(np.prod(shape)) if shape else 1
            if off + size > raw.size:
                raise DataError(f"checkpoint blob too short for tensor {name}")
            arr = raw[off : off + size].reshape(shape).astype(dtype)
            if name.startswith("adam."):
                _, kind, pname = name.split(".", 2)
                moments.setdefault(kind, {})[pname] = arr
            elif name in model.params:
                model.params[name] = arr
            elif name in model.buffers:
                model.buffers[name] = arr
            elif name in ("feature_mean", "feature_std"):
                setattr(model, name, arr)
            else:
                raise DataError(f"unexpected tensor {name!r} in checkpoint")
            expected.discard(name)
        if expected:
            raise DataError(f"checkpoint missing tensors: {sorted(expected)}")
        transform = None if manifest["transform"] is None else FeatureTransform.from_dict(manifest["transform"])
        return cls(
            model.eval_mode(),
            TrainConfig.from_dict(manifest["config"]),
            int(manifest["epoch"]),
            int(manifest.get("step", 0)),
            moments or None,
            transform,
            manifest.get("metadata", {}),
        )


def _ckpt_stem(path: str | os.PathLike) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        return p.with_suffix("")
    return p


@dataclass(eq=False)
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log: list[EpochRecord]


def predict_proba(model: MlpModel, features: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Eval-mode class probabilities, computed in row chunks."""
    features = np.asarray(features)
    out = np.empty((features.shape[0], model.n_classes), dtype=model.dtype)
    for start in range(0, features.shape[0], chunk):
        out[start : start + chunk] = forward(model, features[start : start + chunk], training=False)
    return out


def _accuracy(model: MlpModel, samples: SampleSet) -> float:
    if len(samples) == 0:
        return float("nan")
    pred = np.argmax(predict_proba(model, samples.features), axis=1)
    return float(np.mean(pred == samples.labels))


def train(
    model: MlpModel,
    train_set: SampleSet,
    val_set: SampleSet | None,
    config: TrainConfig,
    transform: FeatureTransform | None = None,
    metadata: dict[str, Any] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Fit ``model`` in place and return final and best-validation checkpoints.

    Shuffling and dropout masks come from dedicated streams of
    ``config.seed``, so identical inputs give identical logs and weights.
    A trailing minibatch of one sample is skipped (batch-norm needs two).
    """
    if train_set.dim != model.input_dim:
        raise DataError(f"training features have dim {train_set.dim}, model expects {model.input_dim}")
    if val_set is not None and len(val_set) and val_set.dim != model.input_dim:
        raise DataError(f"validation features have dim {val_set.dim}, model expects {model.input_dim}")
    if len(train_set) < 2:
        raise DataError("need at least 2 training samples")
    if train_set.labels.max() >= model.n_classes or train_set.labels.min() < 0:
        raise DataError("training labels out of range")
    metadata = dict(metadata or {})
    model.set_feature_stats(train_set.features)
    features = train_set.features.astype(model.dtype, copy=False)
    labels = train_set.labels
    shuffle_rng = rng_for(config.seed, "shuffle")
    dropout_rng = rng_for(config.seed, "dropout")
    moments = init_moments(model.params)
    step = 0
    log: list[EpochRecord] = []
    best: Checkpoint | None = None
    best_oa = -math.inf
    n = len(train_set)
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        model.train_mode()
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue
            loss, grads, stats = loss_and_grads(model, features[idx], labels[idx], True, dropout_rng)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            _update_running_stats(model, stats, idx.size)
            step += 1
            adam_step(model.params, grads, moments, step, lr, config.beta1, config.beta2, config.eps)
            total += loss * idx.size
            seen += idx.size
        model.eval_mode()
        val_oa = _accuracy(model, val_set) if val_set is not None else float("nan")
        record = EpochRecord(epoch, lr, total / seen, val_oa)
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if best is None or (math.isfinite(val_oa) and val_oa > best_oa):
            best_oa = val_oa if math.isfinite(val_oa) else best_oa
            best = Checkpoint(
                model.copy(), config, epoch + 1, step, copy.deepcopy(moments), transform,
                {**metadata, "selected_by": "best_val"},
            )
    final = Checkpoint(model.copy(), config, config.epochs, step, moments, transform, {**metadata, "selected_by": "final"})
    assert best is not None
    return TrainResult(final, best, log)


def write_log_csv(log: list[EpochRecord], path: str | os.PathLike | None = None) -> str:
    """Serialise the epoch log as CSV (epoch, lr, train_loss, val_oa)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "train_loss", "val_oa"])
    for r in log:
        w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_oa)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def predict_pixels(
    model: MlpModel,
    cube: HsCube,
    transform: FeatureTransform | None = None,
    chunk: int = 65536,
) -> tuple[np.ndarray, np.ndarray]:
    """Classify every pixel of ``cube`` independently.

    Returns an H x W label map (argmax, ties to the lowest class index) and
    the matching H x W map of winning probabilities.
    """
    h, w, b = cube.shape
    in_dim = transform.input_dim if transform is not None else model.input_dim
    if b != in_dim:
        raise DataError(f"cube has {b} bands, model pipeline expects {in_dim}")
    if transform is not None and transform.output_dim != model.input_dim:
        raise DataError(
            f"transform yields {transform.output_dim} features, model expects {model.input_dim}"
        )
    flat = cube.data.reshape(h * w, b)
    labels = np.empty(h * w, dtype=np.int64)
    conf = np.empty(h * w, dtype=np.float32)
    for start in range(0, h * w, chunk):
        feats = flat[start : start + chunk]
        if transform is not None:
            feats = transform.apply(feats)
        probs = forward(model, feats, training=False)
        k = np.argmax(probs, axis=1)
        labels[start : start + chunk] = k
        conf[start : start + chunk] = probs[np.arange(k.size), k]
    return labels.reshape(h, w), conf.reshape(h, w)
