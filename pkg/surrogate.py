"""
MLP surrogate from the six absolute link lengths to (eta, tau1, tau2)

One hidden ReLU layer by default, trained full-batch with Adam on min-max
scaled inputs and z-scored targets; early stopping restores the best weights.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import mean_squared_error, r2_score

from errors import DataError, MissingColumns, NonFiniteLoss, TooFewRows
from schemas import ABS_LENGTH_NAMES, TARGET_NAMES, MlpHyperparams, RegressionMetrics, TargetMetrics

logger = logging.getLogger(__name__)

MIN_ROWS = 10
MODEL_FORMAT = "mlp-regressor"


def _safe_range(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    return np.where(span > 0, span, 1.0)


@dataclass
class SurrogateModel:
    """Trained network plus the normalization it was trained under"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input_min: np.ndarray
    input_range: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    target_min: np.ndarray
    target_max: np.ndarray
    feature_names: List[str] = field(default_factory=lambda: list(ABS_LENGTH_NAMES))
    target_names: List[str] = field(default_factory=lambda: list(TARGET_NAMES))
    metadata: Dict = field(default_factory=dict)

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def normalize_inputs(self, X: np.ndarray) -> np.ndarray:
        return (X - self.input_min) / self.input_range

    def standardize_targets(self, Y: np.ndarray) -> np.ndarray:
        return (Y - self.target_mean) / self.target_std

    def destandardize_targets(self, Z: np.ndarray) -> np.ndarray:
        return Z * self.target_std + self.target_mean

    def predict(self, X) -> np.ndarray:
        """Denormalized predictions; a single 6-vector gives a 3-vector"""
        arr = np.asarray(X, dtype=float)
        single = arr.ndim == 1
        out, _, _ = _forward(self.weights, self.biases, self.normalize_inputs(np.atleast_2d(arr)))
        pred = self.destandardize_targets(out)
        return pred[0] if single else pred

    def extrapolation_mask(self, X) -> np.ndarray:
        """True for rows outside the per-feature training box"""
        arr = np.atleast_2d(np.asarray(X, dtype=float))
        lo, hi = self.input_min, self.input_min + self.input_range
        return np.any((arr < lo) | (arr > hi), axis=1)

    def to_dict(self) -> Dict:
        return {
            "format": MODEL_FORMAT,
            "version": 1,
            "layer_sizes": self.layer_sizes,
            "activation": "relu",
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_min": self.input_min.tolist(),
            "input_range": self.input_range.tolist(),
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
            "target_min": self.target_min.tolist(),
            "target_max": self.target_max.tolist(),
            "feature_names": list(self.feature_names),
            "target_names": list(self.target_names),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SurrogateModel":
        if data.get("format") != MODEL_FORMAT:
            raise DataError(f"Not a surrogate model file (format={data.get('format')!r})")
        arr = lambda key: np.asarray(data[key], dtype=float)
        return cls(
            weights=[np.asarray(w, dtype=float) for w in data["weights"]],
            biases=[np.asarray(b, dtype=float) for b in data["biases"]],
            input_min=arr("input_min"),
            input_range=arr("input_range"),
            target_mean=arr("target_mean"),
            target_std=arr("target_std"),
            target_min=arr("target_min"),
            target_max=arr("target_max"),
            feature_names=list(data["feature_names"]),
            target_names=list(data["target_names"]),
            metadata=dict(data.get("metadata", {})),
        )


# ==================== DATA ====================

def features_targets(frame: pd.DataFrame) -> Tuple[np.ndarray, np.ndarray]:
    """Absolute lengths (n, 6) and labels (n, 3) of a labeled dataset"""
    columns = list(ABS_LENGTH_NAMES) + list(TARGET_NAMES)
    missing = [col for col in columns if col not in frame.columns]
    if missing:
        raise MissingColumns(f"Dataset is missing columns: {', '.join(missing)}")
    X = frame[list(ABS_LENGTH_NAMES)].to_numpy(dtype=float)
    Y = frame[list(TARGET_NAMES)].to_numpy(dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise DataError("Dataset contains non-finite features or labels")
    return X, Y


def split(dataset: pd.DataFrame, ratio: float = 0.8, seed: int = 0) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Seeded shuffle split into disjoint train/test parts"""
    n = len(dataset)
    if n < MIN_ROWS:
        raise TooFewRows(f"Need at least {MIN_ROWS} rows to split, got {n}")
    if not 0 < ratio < 1:
        raise ValueError("Split ratio must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratio * n))
    return dataset.iloc[order[:n_train]], dataset.iloc[order[n_train:]]


# ==================== NETWORK ====================

def _forward(weights, biases, X):
    hidden = [X]
    pre = []
    h = X
    for W, b in zip(weights[:-1], biases[:-1]):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        hidden.append(h)
    return h @ weights[-1] + biases[-1], hidden, pre


def loss_and_gradients(
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    X: np.ndarray,
    Y: np.ndarray,
) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """Mean squared error over all outputs and its backpropagated gradients"""
    out, hidden, pre = _forward(weights, biases, X)
    diff = out - Y
    loss = float(np.mean(diff ** 2))
    delta = 2.0 * diff / diff.size
    grad_w: List[np.ndarray] = [None] * len(weights)
    grad_b: List[np.ndarray] = [None] * len(biases)
    for layer in reversed(range(len(weights))):
        grad_w[layer] = hidden[layer].T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ weights[layer].T) * (pre[layer - 1] > 0)
    return loss, grad_w, grad_b


def init_parameters(layer_sizes: Sequence[int], rng: np.random.Generator) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Uniform fan-in initialization"""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return weights, biases


def fit(
    X: np.ndarray,
    Y: np.ndarray,
    hp: Optional[MlpHyperparams] = None,
    seed: int = 0,
    feature_names: Optional[Sequence[str]] = None,
    target_names: Optional[Sequence[str]] = None,
) -> SurrogateModel:
    """
    Train the network on raw features and targets

    Args:
        X: (n, n_features) inputs
        Y: (n, n_targets) labels
        hp: network and optimizer settings
        seed: drives the validation fold and weight initialization

    Returns:
        SurrogateModel holding the weights with the lowest monitored loss
    """
    hp = hp or MlpHyperparams()
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) == 0 or len(X) != len(Y):
        raise DataError(f"Training data is empty or misaligned ({len(X)} inputs, {len(Y)} targets)")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise DataError("Training data contains non-finite values")

    rng = np.random.default_rng(seed)
    input_min = X.min(axis=0)
    input_range = _safe_range(input_min, X.max(axis=0))
    target_mean = Y.mean(axis=0)
    target_std = Y.std(axis=0)
    target_std = np.where(target_std > 0, target_std, 1.0)
    Xn = (X - input_min) / input_range
    Yz = (Y - target_mean) / target_std

    n = len(X)
    n_val = int(round(hp.validation_fraction * n))
    if n_val < 1 or n - n_val < 2:
        n_val = 0
    order = rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    X_train, Y_train = Xn[train_idx], Yz[train_idx]
    X_val, Y_val = Xn[val_idx], Yz[val_idx]

    sizes = [X.shape[1]] + [hp.hidden_nodes] * hp.hidden_layers + [Y.shape[1]]
    weights, biases = init_parameters(sizes, rng)
    params = weights + biases
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]

    best_loss = math.inf
    best_epoch = 0
    best_params = [p.copy() for p in params]
    snapshots: List[Tuple[int, float]] = []
    train_loss = math.inf
    epoch = 0
    for epoch in range(1, hp.max_epochs + 1):
        train_loss, grad_w, grad_b = loss_and_gradients(weights, biases, X_train, Y_train)
        if not math.isfinite(train_loss):
            raise NonFiniteLoss(f"Training loss became {train_loss} at epoch {epoch}")
        if n_val:
            out, _, _ = _forward(weights, biases, X_val)
            monitored = float(np.mean((out - Y_val) ** 2))
        else:
            monitored = train_loss
        if monitored < best_loss:
            best_loss = monitored
            best_epoch = epoch
            best_params = [p.copy() for p in params]
            snapshots.append((epoch, monitored))
        elif epoch - best_epoch >= hp.patience:
            logger.info(f"Early stopping at epoch {epoch}; best monitored loss {best_loss:.3e} at epoch {best_epoch}")
            break

        grads = grad_w + grad_b
        for i, (p, g) in enumerate(zip(params, grads)):
            m_state[i] = hp.beta1 * m_state[i] + (1 - hp.beta1) * g
            v_state[i] = hp.beta2 * v_state[i] + (1 - hp.beta2) * g * g
            m_hat = m_state[i] / (1 - hp.beta1 ** epoch)
            v_hat = v_state[i] / (1 - hp.beta2 ** epoch)
            p -= hp.learning_rate * m_hat / (np.sqrt(v_hat) + hp.epsilon)

        if epoch % hp.log_every == 0:
            logger.info(f"epoch {epoch}: train loss {train_loss:.3e}, monitored {monitored:.3e}")

    n_layers = len(weights)
    model = SurrogateModel(
        weights=best_params[:n_layers],
        biases=best_params[n_layers:],
        input_min=input_min,
        input_range=input_range,
        target_mean=target_mean,
        target_std=target_std,
        target_min=Y.min(axis=0),
        target_max=Y.max(axis=0),
        feature_names=list(feature_names) if feature_names else [f"x{i}" for i in range(X.shape[1])],
        target_names=list(target_names) if target_names else [f"y{i}" for i in range(Y.shape[1])],
        metadata={
            "seed": seed,
            "hyperparams": hp.model_dump(),
            "epochs_run": epoch,
            "best_epoch": best_epoch,
            "best_monitored_loss": best_loss,
            "final_train_loss": train_loss,
            "monitor": "validation" if n_val else "train",
            "n_train": int(len(train_idx)),
            "n_validation": int(n_val),
            "loss_snapshots": snapshots[-50:],
        },
    )
    return model


def predict(model: SurrogateModel, lengths_abs) -> np.ndarray:
    """(eta', tau1', tau2') for one or many length vectors"""
    return model.predict(lengths_abs)


# ==================== METRICS ====================

def regression_metrics(
    Y_true: np.ndarray,
    Y_pred: np.ndarray,
    target_min: np.ndarray,
    target_max: np.ndarray,
    target_names: Sequence[str],
) -> RegressionMetrics:
    """R², MSE and RMSE after min-max scaling both sides with training extremes"""
    Y_true = np.atleast_2d(np.asarray(Y_true, dtype=float))
    Y_pred = np.atleast_2d(np.asarray(Y_pred, dtype=float))
    if len(Y_true) == 0:
        raise DataError("Cannot evaluate on an empty set")
    span = _safe_range(np.asarray(target_min), np.asarray(target_max))
    true_n = (Y_true - target_min) / span
    pred_n = (Y_pred - target_min) / span
    r2 = r2_score(true_n, pred_n, multioutput="raw_values")
    mse = mean_squared_error(true_n, pred_n, multioutput="raw_values")
    per_target = {
        name: TargetMetrics(r2=float(r), mse=float(e), rmse=float(math.sqrt(e)))
        for name, r, e in zip(target_names, r2, mse)
    }
    total_mse = float(np.mean(mse))
    aggregate = TargetMetrics(r2=float(np.mean(r2)), mse=total_mse, rmse=math.sqrt(total_mse))
    return RegressionMetrics(per_target=per_target, aggregate=aggregate, n_rows=len(Y_true))


def evaluate(model: SurrogateModel, X: np.ndarray, Y: np.ndarray) -> RegressionMetrics:
    return regression_metrics(Y, model.predict(np.atleast_2d(X)), model.target_min, model.target_max, model.target_names)
