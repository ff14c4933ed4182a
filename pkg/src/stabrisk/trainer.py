"""Seeded logistic-regression and feed-forward risk models.

Both models are scikit-learn estimators trained from scratch with numpy on
dense or CSR input.  Every source of training randomness (weight
initialisation, minibatch order, dropout masks) is drawn from its own Philox
stream derived from ``random_state``, so a fit is bit-reproducible for fixed
data and parameters, and changing the seed is the only way to perturb it.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _rng
from .exceptions import ConfigError, DataError, TrainingError

MODEL_MAGIC = b"STABRISK"
MODEL_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    """Hyper-parameters shared by both model kinds.

    ``architecture`` is ignored by the logistic model.  The default widths are
    the full-size network; ``DESK_ARCHITECTURE`` is the small override used by
    the shipped benchmark.
    """

    architecture: tuple = (128, 64, 32)
    dropout_rate: float = 0.1
    batch_size: int = 512
    learning_rate: float = 1e-3
    lr_decay: float = 1.0
    l1: float = 0.0
    l2: float = 0.0
    epochs: int = 5
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.architecture = tuple(int(w) for w in self.architecture)
        self.validate()

    def validate(self):
        if any(w <= 0 for w in self.architecture):
            raise ConfigError("hidden widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.learning_rate <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("learning_rate must be positive and lr_decay in (0, 1]")
        if self.l1 < 0 or self.l2 < 0:
            raise ConfigError("regularisation coefficients must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ConfigError("invalid Adam constants")

    def estimator_params(self) -> dict:
        d = asdict(self)
        d["random_state"] = d.pop("seed")
        d["hidden_layer_sizes"] = d.pop("architecture")
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        values = dict(values)
        if "hidden_layer_sizes" in values:
            values["architecture"] = values.pop("hidden_layer_sizes")
        if isinstance(values.get("architecture"), str):
            values["architecture"] = [int(w) for w in values["architecture"].split(",") if w]
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


DESK_ARCHITECTURE = (32, 16, 8)


# ---------------------------------------------------------------------------
# forward / backward


def _matmul(X, W):
    out = X @ W
    return np.asarray(out)


def forward(weights, biases, X, masks=None):
    """Return the output logits and the cached hidden activations.

    ``masks`` (one per hidden layer, already scaled by ``1/(1-p)``) applies
    inverted dropout; ``None`` disables it.
    """
    acts = [X]
    h = X
    n_hidden = len(weights) - 1
    for i in range(n_hidden):
        z = _matmul(h, weights[i]) + biases[i]
        h = np.maximum(z, 0.0)
        if masks is not None and masks[i] is not None:
            h = h * masks[i]
        acts.append(h)
    logits = _matmul(h, weights[-1])[:, 0] + biases[-1][0]
    return logits, acts


def bce_from_logits(logits, y):
    """Mean binary cross-entropy computed stably from logits."""
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def penalty(weights, l1, l2):
    total = 0.0
    for W in weights:
        if l1:
            total += l1 * np.abs(W).sum()
        if l2:
            total += l2 * np.square(W).sum()
    return float(total)


def loss_and_grad(weights, biases, X, y, l1=0.0, l2=0.0, masks=None):
    """Regularised BCE and its gradient with respect to every weight and bias."""
    logits, acts = forward(weights, biases, X, masks)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    loss = bce_from_logits(logits, y) + penalty(weights, l1, l2)

    delta = ((expit(logits) - y) / n)[:, None]
    grad_w = [None] * len(weights)
    grad_b = [None] * len(biases)
    for i in range(len(weights) - 1, -1, -1):
        a = acts[i]
        gw = a.T @ delta
        grad_w[i] = np.asarray(gw)
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            d = delta @ weights[i].T
            if masks is not None and masks[i - 1] is not None:
                d = d * masks[i - 1]
            delta = d * (acts[i] > 0)
    for i, W in enumerate(weights):
        if l1:
            grad_w[i] = grad_w[i] + l1 * np.sign(W)
        if l2:
            grad_w[i] = grad_w[i] + 2.0 * l2 * W
    return loss, grad_w, grad_b


class _Adam:
    def __init__(self, params, beta1, beta2, epsilon):
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


class _SGD:
    def __init__(self, params, *args):
        pass

    def step(self, params, grads, lr):
        for p, g in zip(params, grads):
            p -= lr * g


# ---------------------------------------------------------------------------
# estimators


class _RiskModel(ClassifierMixin, BaseEstimator):
    """Shared minibatch training loop; subclasses define the architecture."""

    kind = None

    def _hidden_sizes(self):
        raise NotImplementedError

    def _init_params(self, n_features, rng):
        raise NotImplementedError

    def _check_params(self):
        TrainConfig(
            architecture=self._hidden_sizes(),
            dropout_rate=self.dropout_rate,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            l1=self.l1,
            l2=self.l2,
            epochs=self.epochs,
            optimizer=self.optimizer,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            seed=self.random_state,
        )

    def initialize(self, n_features):
        """Set the starting parameters drawn from the seeded init stream, without training."""
        self._check_params()
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(n_features)
        rng = _rng.generator(self.random_state, "init")
        self.coefs_, self.intercepts_ = self._init_params(self.n_features_in_, rng)
        self.loss_curve_, self.validation_loss_curve_ = [], []
        return self

    def fit(self, X, y, X_val=None, y_val=None):
        """Train for ``epochs`` passes; record training and validation loss per epoch.

        Parameters
        ----------
        X : array-like or sparse matrix, shape (n_samples, n_features)
        y : array-like of {0, 1}
        X_val, y_val : optional held-out data whose loss is logged each epoch
            (no early stopping).
        """
        self._check_params()
        X, y = check_X_y(X, y, accept_sparse="csr", dtype=np.float64)
        classes = np.unique(y)
        if len(classes) < 2 or not set(classes.tolist()) <= {0, 1}:
            raise TrainingError("training data must contain both classes 0 and 1")
        y = y.astype(np.float64)

        seed = self.random_state
        shuffle_rng = _rng.generator(seed, "shuffle")
        dropout_rng = _rng.generator(seed, "dropout")
        self.initialize(X.shape[1])
        params = self.coefs_ + self.intercepts_  # updated in place by the optimiser
        opt = (_Adam if self.optimizer == "adam" else _SGD)(
            params, self.beta1, self.beta2, self.epsilon
        )
        p = self.dropout_rate
        n = X.shape[0]

        self.loss_curve_ = []
        self.validation_loss_curve_ = []
        for epoch in range(self.epochs):
            lr = self.learning_rate * self.lr_decay**epoch
            perm = shuffle_rng.permutation(n)
            Xs, ys = X[perm], y[perm]
            total = 0.0
            for start in range(0, n, self.batch_size):
                stop = min(start + self.batch_size, n)
                xb, yb = Xs[start:stop], ys[start:stop]
                masks = None
                if p > 0 and self._hidden_sizes():
                    masks = [
                        (dropout_rng.random((stop - start, w)) >= p) / (1.0 - p)
                        for w in self._hidden_sizes()
                    ]
                loss, gw, gb = loss_and_grad(
                    self.coefs_, self.intercepts_, xb, yb, self.l1, self.l2, masks
                )
                total += loss * (stop - start)
                opt.step(params, gw + gb, lr)
            self.loss_curve_.append(total / n)
            if X_val is not None:
                self.validation_loss_curve_.append(self.score_loss(X_val, y_val))
        return self

    def _check_input(self, X):
        check_is_fitted(self, "coefs_")
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(
                f"X has {X.shape[1]} features, model was trained with {self.n_features_in_}"
            )
        return X

    def decision_function(self, X):
        X = self._check_input(X)
        return forward(self.coefs_, self.intercepts_, X)[0]

    def predict_proba(self, X):
        s = expit(self.decision_function(X))
        return np.column_stack([1.0 - s, s])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def score_loss(self, X, y):
        """Unregularised mean cross-entropy on ``(X, y)``."""
        y = np.asarray(y, dtype=np.float64)
        return bce_from_logits(self.decision_function(X), y)

    def flat_weights(self):
        check_is_fitted(self, "coefs_")
        return np.concatenate([a.ravel() for a in self.coefs_ + self.intercepts_])


class LogisticRiskModel(_RiskModel):
    """Logistic regression trained by minibatch SGD/Adam from an all-zero start."""

    kind = "logistic"

    def __init__(
        self,
        dropout_rate=0.0,
        batch_size=512,
        learning_rate=1e-2,
        lr_decay=1.0,
        l1=0.0,
        l2=0.0,
        epochs=5,
        optimizer="adam",
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        random_state=0,
    ):
        self.dropout_rate = dropout_rate
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.l1 = l1
        self.l2 = l2
        self.epochs = epochs
        self.optimizer = optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.random_state = random_state

    def _hidden_sizes(self):
        return ()

    def _init_params(self, n_features, rng):
        return [np.zeros((n_features, 1))], [np.zeros(1)]


class MLPRiskModel(_RiskModel):
    """Feed-forward ReLU network with dropout after each hidden layer.

    Weights use Glorot-uniform initialisation, ``U(-a, a)`` with
    ``a = sqrt(6 / (fan_in + fan_out))``; biases start at zero.  The output
    layer is a single sigmoid unit.
    """

    kind = "mlp"

    def __init__(
        self,
        hidden_layer_sizes=(128, 64, 32),
        dropout_rate=0.1,
        batch_size=512,
        learning_rate=1e-3,
        lr_decay=1.0,
        l1=0.0,
        l2=0.0,
        epochs=5,
        optimizer="adam",
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.dropout_rate = dropout_rate
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.l1 = l1
        self.l2 = l2
        self.epochs = epochs
        self.optimizer = optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.random_state = random_state

    def _hidden_sizes(self):
        return tuple(int(w) for w in self.hidden_layer_sizes)

    def _init_params(self, n_features, rng):
        sizes = (n_features,) + self._hidden_sizes() + (1,)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return weights, biases


MODEL_KINDS = {"logistic": LogisticRiskModel, "lr": LogisticRiskModel, "mlp": MLPRiskModel}


def make_model(kind, config: TrainConfig):
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}") from None
    params = config.estimator_params()
    if cls is LogisticRiskModel:
        params.pop("hidden_layer_sizes")
    return cls(**params)


def train_logistic(X, y, config: TrainConfig, X_val=None, y_val=None) -> LogisticRiskModel:
    return make_model("logistic", config).fit(X, y, X_val, y_val)


def train_mlp(X, y, config: TrainConfig, X_val=None, y_val=None) -> MLPRiskModel:
    return make_model("mlp", config).fit(X, y, X_val, y_val)


def predict(model: _RiskModel, X) -> np.ndarray:
    """Risk scores in (0, 1); dropout is never applied at inference."""
    return model.predict_proba(X)[:, 1]


# ---------------------------------------------------------------------------
# serialisation
#
# layout: MAGIC | u32 version | u32 header length | JSON header |
#         per layer: W (fan_in*fan_out <f8, C order) then b (fan_out <f8)


def save_model(model: _RiskModel, path) -> Path:
    check_is_fitted(model, "coefs_")
    header = {
        "kind": model.kind,
        "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in model.get_params().items()},
        "n_features": int(model.n_features_in_),
        "layers": [list(W.shape) for W in model.coefs_],
        "loss_curve": [float(x) for x in model.loss_curve_],
        "validation_loss_curve": [float(x) for x in model.validation_loss_curve_],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_FORMAT_VERSION, len(blob)))
    buf.write(blob)
    for W, b in zip(model.coefs_, model.intercepts_):
        buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def load_model(path) -> _RiskModel:
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise DataError(f"{path}: not a model file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != MODEL_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported model format version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    cls = MODEL_KINDS[header["kind"]]
    params = header["params"]
    if "hidden_layer_sizes" in params:
        params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
    model = cls(**params)
    offset = 16 + hlen
    weights, biases = [], []
    for fan_in, fan_out in header["layers"]:
        W = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(W.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    if offset != len(data):
        raise DataError(f"{path}: trailing or missing weight bytes")
    model.coefs_, model.intercepts_ = weights, biases
    model.classes_ = np.array([0, 1])
    model.n_features_in_ = header["n_features"]
    model.loss_curve_ = header["loss_curve"]
    model.validation_loss_curve_ = header["validation_loss_curve"]
    return model
