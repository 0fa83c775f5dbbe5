"""The denoising autoencoder and the Bi-GRU identity classifier.

Both are scikit-learn compatible estimators (``get_params``/``set_params``,
``fit`` returning ``self``, fitted attributes with a trailing underscore), so
they drop into pipelines and ``sklearn.base.clone``.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from twinforge.exceptions import (
    DimensionError,
    NumericError,
    TrainingError,
    ValidationError,
)
from twinforge.nn import (
    AdamState,
    BiGRU,
    Dense,
    Dropout,
    LayerNorm,
    Sequential,
    TrainConfig,
    backprop,
    optimize_step,
)
from twinforge.nn.serialization import load_weights, save_weights
from twinforge.telemetry import N_FEATURES, WINDOW_ROWS

logger = logging.getLogger(__name__)

LATENT_DIM = 62


def _seeds(random_state, n):
    ss = np.random.SeedSequence(random_state)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def _train_loop(network, X, targets, loss, *, epochs, batch_size, config, rng,
                corrupt=None, on_epoch=None):
    """Mini-batch Adam over ``network``; shared by both estimators."""
    params = [p for _, p, _ in network.parameters()]
    state = AdamState.zeros_like(params)
    n = len(X)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = X[idx] if corrupt is None else corrupt(X[idx])
            try:
                _, grads = backprop(network, xb, targets[idx], loss=loss, training=True)
            except NumericError as exc:
                raise TrainingError(f"training diverged: {exc}", epoch) from exc
            optimize_step(params, list(grads.values()), state, config)
        if on_epoch is not None:
            on_epoch(epoch)


def _as_patterns(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape == (WINDOW_ROWS, N_FEATURES):
        X = X[None]
    if X.ndim == 3:
        if X.shape[1:] != (WINDOW_ROWS, N_FEATURES):
            raise DimensionError(
                f"patterns must be {WINDOW_ROWS}x{N_FEATURES}, got {X.shape[1:]}"
            )
        X = X.reshape(len(X), -1)
    if X.ndim != 2 or X.shape[1] != WINDOW_ROWS * N_FEATURES:
        raise DimensionError(
            f"expected (n, {WINDOW_ROWS}, {N_FEATURES}) or (n, {WINDOW_ROWS * N_FEATURES}), "
            f"got {X.shape}"
        )
    return check_array(X, dtype=np.float64)


class DenoisingAutoencoder(TransformerMixin, BaseEstimator):
    """Compress 34x5 behavioural patterns to a 62-element encoding.

    The pattern is flattened row-major to 170 values and passed through five
    blocks of dense -> layer norm -> dropout (170 -> 144 -> 120 -> 100 -> 82
    -> 62). The decoder mirrors the hidden blocks and ends in a sigmoid layer
    back to 170 values. Training corrupts inputs with Gaussian noise and
    regresses the clean pattern under mean squared error.

    ``transform`` returns encodings, ``inverse_transform`` returns 34x5
    reconstructions clamped to [0, 1].
    """

    def __init__(
        self,
        hidden_widths=(144, 120, 100, 82),
        latent_dim=LATENT_DIM,
        activation="tanh",
        dropout_rate=0.0,
        noise_sigma=0.05,
        learning_rate=1e-3,
        epochs=30,
        batch_size=32,
        random_state=0,
    ):
        self.hidden_widths = hidden_widths
        self.latent_dim = latent_dim
        self.activation = activation
        self.dropout_rate = dropout_rate
        self.noise_sigma = noise_sigma
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    @classmethod
    def from_config(cls, config, **overrides):
        kw = dict(
            dropout_rate=config.dropout_rate,
            noise_sigma=config.input_noise_sigma,
            learning_rate=config.learning_rate,
            epochs=config.epochs,
            batch_size=config.batch_size,
            random_state=config.seed,
        )
        kw.update(overrides)
        return cls(**kw)

    def _config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            dropout_rate=self.dropout_rate,
            input_noise_sigma=self.noise_sigma,
            seed=self.random_state,
        )

    def _build(self):
        init_rng, drop_rng = _seeds(self.random_state, 2)
        widths = [WINDOW_ROWS * N_FEATURES, *self.hidden_widths, self.latent_dim]

        def block(n_in, n_out):
            return [
                Dense(n_in, n_out, self.activation, init_rng),
                LayerNorm(n_out),
                Dropout(self.dropout_rate, drop_rng),
            ]

        enc = []
        for a, b in zip(widths[:-1], widths[1:]):
            enc += block(a, b)
        back = widths[::-1]
        dec = []
        for a, b in zip(back[:-2], back[1:-1]):
            dec += block(a, b)
        dec.append(Dense(back[-2], back[-1], "sigmoid", init_rng))
        self.encoder_ = Sequential(enc)
        self.decoder_ = Sequential(dec)
        self.network_ = Sequential(enc + dec)

    def fit(self, X, y=None, eval_set=None):
        """Train on ``X``; ``eval_set`` (patterns) is scored each epoch."""
        config = self._config()
        X = _as_patterns(X)
        if not len(X):
            raise ValidationError("cannot train the autoencoder on an empty set")
        X_eval = _as_patterns(eval_set) if eval_set is not None else None
        self._build()
        noise_rng, shuffle_rng = _seeds(self.random_state, 4)[2:]
        sigma = self.noise_sigma
        self.history_ = {"train_mse": [], "test_mse": []}

        def corrupt(batch):
            if sigma == 0:
                return batch
            return batch + noise_rng.normal(0.0, sigma, batch.shape)

        def on_epoch(epoch):
            tr = self._mse(X)
            self.history_["train_mse"].append(tr)
            if X_eval is not None:
                self.history_["test_mse"].append(self._mse(X_eval))
            if not np.isfinite(tr):
                raise TrainingError("non-finite reconstruction loss", epoch)
            logger.info("dae epoch %d train_mse=%.5f", epoch, tr)

        _train_loop(self.network_, X, X, "mse", epochs=config.epochs,
                    batch_size=config.batch_size, config=config, rng=shuffle_rng,
                    corrupt=corrupt, on_epoch=on_epoch)
        self.n_features_in_ = X.shape[1]
        return self

    def _mse(self, X_flat):
        out = self.network_.forward(X_flat, training=False)
        return float(np.mean((np.clip(out, 0.0, 1.0) - X_flat) ** 2))

    def transform(self, X):
        check_is_fitted(self, "network_")
        return self.encoder_.forward(_as_patterns(X), training=False)

    def inverse_transform(self, Z):
        check_is_fitted(self, "network_")
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] != self.latent_dim:
            raise DimensionError(f"encodings must have length {self.latent_dim}, got {Z.shape[1]}")
        out = self.decoder_.forward(Z, training=False)
        return np.clip(out, 0.0, 1.0).reshape(len(Z), WINDOW_ROWS, N_FEATURES)

    def reconstruction_mse(self, X):
        check_is_fitted(self, "network_")
        return self._mse(_as_patterns(X))

    def score(self, X, y=None):
        return -self.reconstruction_mse(X)

    @property
    def layers_(self):
        return self.network_.layers


class BiGRUClassifier(ClassifierMixin, BaseEstimator):
    """Identify the device behind an encoding.

    The encoding is read as a sequence of scalars (one per element) by a
    bidirectional GRU; the concatenated final states go through a softmax
    layer over ``n_classes`` identities.
    """

    def __init__(self, hidden_size=32, n_classes=None, learning_rate=5e-3, epochs=20,
                 batch_size=32, random_state=0):
        self.hidden_size = hidden_size
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    @classmethod
    def from_config(cls, config, **overrides):
        kw = dict(
            learning_rate=config.learning_rate,
            epochs=config.epochs,
            batch_size=config.batch_size,
            random_state=config.seed,
        )
        kw.update(overrides)
        return cls(**kw)

    def _build(self, n_in_steps, n_classes):
        init_rng = _seeds(self.random_state, 1)[0]
        self.network_ = Sequential([
            BiGRU(1, self.hidden_size, init_rng),
            Dense(2 * self.hidden_size, n_classes, "softmax", init_rng),
        ])
        self.n_features_in_ = n_in_steps

    def _validate_labels(self, y, n_classes):
        y = np.asarray(y)
        if y.ndim != 1:
            raise ValidationError("labels must be one-dimensional")
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValidationError("labels must be integers")
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= n_classes:
            raise ValidationError(f"labels must lie in [0, {n_classes}), got range "
                                  f"[{y.min()}, {y.max()}]")
        return y

    def fit(self, X, y, eval_set=None):
        X = check_array(X, dtype=np.float64)
        n_classes = self.n_classes if self.n_classes is not None else int(np.max(y)) + 1
        y = self._validate_labels(y, n_classes)
        if len(y) != len(X):
            raise ValidationError("X and y have different lengths")
        config = TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                             batch_size=self.batch_size, dropout_rate=0.0,
                             input_noise_sigma=0.0, seed=self.random_state)
        self.classes_ = np.arange(n_classes)
        self._build(X.shape[1], n_classes)
        shuffle_rng = _seeds(self.random_state, 2)[1]
        if eval_set is not None:
            X_eval = check_array(eval_set[0], dtype=np.float64)
            y_eval = self._validate_labels(eval_set[1], n_classes)
        self.history_ = {"train_loss": [], "train_accuracy": [], "test_loss": [],
                         "test_accuracy": []}

        def on_epoch(epoch):
            loss, acc = self._loss_acc(X, y)
            if not np.isfinite(loss):
                raise TrainingError("non-finite cross-entropy", epoch)
            self.history_["train_loss"].append(loss)
            self.history_["train_accuracy"].append(acc)
            if eval_set is not None:
                tl, ta = self._loss_acc(X_eval, y_eval)
                self.history_["test_loss"].append(tl)
                self.history_["test_accuracy"].append(ta)
            logger.info("clf epoch %d loss=%.4f acc=%.4f", epoch, loss, acc)

        _train_loop(self.network_, X, y, "cross_entropy", epochs=config.epochs,
                    batch_size=config.batch_size, config=config, rng=shuffle_rng,
                    on_epoch=on_epoch)
        return self

    def _loss_acc(self, X, y):
        p = self.predict_proba(X)
        picked = np.maximum(p[np.arange(len(y)), y], np.finfo(float).tiny)
        return float(-np.mean(np.log(picked))), float(np.mean(p.argmax(axis=1) == y))

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"encodings must have length {self.n_features_in_}, "
                                 f"got {X.shape[1]}")
        out = []
        # bounded batches keep the per-step caches small
        for start in range(0, len(X), 512):
            out.append(self.network_.forward(X[start : start + 512], training=False))
        return np.concatenate(out, axis=0)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def predict_with_threshold(self, X, tau):
        """One :class:`Prediction` per row, judged against ``tau``."""
        thr = tau if isinstance(tau, ThresholdConfig) else ThresholdConfig(tau)
        return [Prediction.from_scores(s, thr.tau) for s in self.predict_proba(X)]

    @property
    def layers_(self):
        return self.network_.layers


# --------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class ThresholdConfig:
    tau: float = 0.695

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must lie in [0, 1], got {self.tau}")


class Verdict(str, Enum):
    ACCEPT = "ACCEPT"
    REJECT_OOC = "REJECT_OOC"


@dataclass(frozen=True)
class Prediction:
    scores: tuple
    label: int
    confidence: float
    verdict: Verdict
    tau: float

    @classmethod
    def from_scores(cls, scores, tau):
        scores = np.asarray(scores, dtype=np.float64)
        label = int(np.argmax(scores))
        conf = float(scores[label])
        verdict = Verdict.ACCEPT if conf >= tau else Verdict.REJECT_OOC
        return cls(tuple(float(s) for s in scores), label, conf, verdict, float(tau))

    @property
    def accepted(self):
        return self.verdict is Verdict.ACCEPT

    @property
    def accepted_class(self):
        return self.label if self.accepted else None

    def to_dict(self):
        return {
            "scores": list(self.scores),
            "label": self.label,
            "confidence": self.confidence,
            "verdict": self.verdict.value,
            "tau": self.tau,
        }


@dataclass(frozen=True)
class EncodedPattern:
    values: tuple
    dt_hint: int = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if vals.shape != (LATENT_DIM,):
            raise DimensionError(f"encoded pattern must have {LATENT_DIM} values, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("encoded pattern has non-finite values")
        object.__setattr__(self, "values", tuple(float(v) for v in vals))

    def as_array(self):
        return np.asarray(self.values, dtype=np.float64)


# --------------------------------------------------------------------------
# functional entry points


def train_dae(split, config=None, **overrides):
    """Fit a :class:`DenoisingAutoencoder` on ``split`` and return (model, report)."""
    config = config or TrainConfig(epochs=30)
    if not len(split.train_X):
        raise ValidationError("split has no training patterns")
    model = DenoisingAutoencoder.from_config(config, **overrides)
    model.fit(split.train_X, eval_set=split.test_X if len(split.test_X) else None)
    h = model.history_
    report = {
        "config": config.to_dict(),
        "train_mse": h["train_mse"],
        "test_mse": h["test_mse"],
        "final_train_mse": h["train_mse"][-1] if h["train_mse"] else model.reconstruction_mse(split.train_X),
        "final_test_mse": (h["test_mse"][-1] if h["test_mse"] else
                           model.reconstruction_mse(split.test_X) if len(split.test_X) else None),
    }
    return model, report


def encode(model, pattern):
    values = pattern.values if hasattr(pattern, "values") and not isinstance(pattern, np.ndarray) else pattern
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (WINDOW_ROWS, N_FEATURES):
        raise DimensionError(f"pattern must be {WINDOW_ROWS}x{N_FEATURES}, got {values.shape}")
    hint = getattr(pattern, "dt_id", None)
    return EncodedPattern(model.transform(values[None])[0], hint)


def decode(model, enc):
    values = enc.as_array() if isinstance(enc, EncodedPattern) else np.asarray(enc, dtype=np.float64)
    if values.shape != (model.latent_dim,):
        raise DimensionError(f"encoding must have length {model.latent_dim}, got {values.shape}")
    return model.inverse_transform(values[None])[0]


def train_classifier(encodings, labels, config=None, n_classes=None, eval_set=None, **overrides):
    """Fit a :class:`BiGRUClassifier` and return (model, report)."""
    config = config or TrainConfig(learning_rate=5e-3, epochs=20)
    X = np.asarray([e.as_array() if isinstance(e, EncodedPattern) else e for e in encodings])
    model = BiGRUClassifier.from_config(config, n_classes=n_classes, **overrides)
    model.fit(X, labels, eval_set=eval_set)
    report = {"config": config.to_dict(), **model.history_}
    for key in ("train_accuracy", "test_accuracy", "train_loss", "test_loss"):
        report[f"final_{key}"] = model.history_[key][-1] if model.history_[key] else None
    return model, report


def predict(model, enc, thr):
    values = enc.as_array() if isinstance(enc, EncodedPattern) else np.asarray(enc, dtype=np.float64)
    if values.shape != (model.n_features_in_,):
        raise DimensionError(f"encoding must have length {model.n_features_in_}, got {values.shape}")
    tau = thr.tau if isinstance(thr, ThresholdConfig) else float(thr)
    return Prediction.from_scores(model.predict_proba(values[None])[0], tau)


# --------------------------------------------------------------------------
# persistence

_ESTIMATORS = {"DenoisingAutoencoder": DenoisingAutoencoder, "BiGRUClassifier": BiGRUClassifier}


def save_model(model, directory, name):
    """Write ``<name>.twm`` weights plus ``<name>.json`` hyperparameters."""
    check_is_fitted(model, "network_")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_weights(directory / f"{name}.twm", model.layers_)
    params = model.get_params()
    if "hidden_widths" in params:
        params["hidden_widths"] = list(params["hidden_widths"])
    meta = {"estimator": type(model).__name__, "params": params,
            "n_features_in": int(model.n_features_in_)}
    if hasattr(model, "classes_"):
        meta["n_classes"] = len(model.classes_)
    (directory / f"{name}.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_model(directory, name):
    directory = Path(directory)
    meta_path = directory / f"{name}.json"
    if not meta_path.exists():
        raise ValidationError(f"no model {name!r} in {directory}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    cls = _ESTIMATORS[meta["estimator"]]
    params = meta["params"]
    if "hidden_widths" in params:
        params["hidden_widths"] = tuple(params["hidden_widths"])
    model = cls(**params)
    if cls is DenoisingAutoencoder:
        model._build()
    else:
        model._build(meta["n_features_in"], meta["n_classes"])
        model.classes_ = np.arange(meta["n_classes"])
    model.n_features_in_ = meta["n_features_in"]
    load_weights(directory / f"{name}.twm", model.layers_)
    return model
