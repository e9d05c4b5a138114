"""Feed-forward regressors for second-stage values, written against numpy.

Layout: inputs are min-max scaled on the non-binary positions, then pass
through ``hidden_layers`` affine layers.  All hidden layers but the last use
ReLU; the last hidden layer and the output layer are linear.  (With a single
hidden layer that layer keeps its ReLU, otherwise the model would collapse to
an affine map.)  Outputs are trained in a robustly standardized space (median, MAD)
and mapped back with the stored shift and scale.

Training minimizes the weighted L1 error ``mean_b sum_k w_k |yhat_bk - y_bk|``
with Adam and keeps the parameters with the best validation loss.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

FORMAT = "mlshaped-network"
VERSION = 1


class ModelFileError(ValueError):
    pass


class CorruptModelError(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class ModelSpecMismatchError(ModelFileError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class NetworkSpec:
    input_len: int
    output_len: int
    hidden_layers: int = 4
    units_per_layer: int = 64

    def __post_init__(self):
        if self.hidden_layers < 1 or self.units_per_layer < 1:
            raise ValueError("need at least one hidden layer with at least one unit")
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError("input and output lengths must be positive")

    def layer_sizes(self) -> list:
        return [self.input_len] + [self.units_per_layer] * self.hidden_layers + [self.output_len]

    def relu_mask(self) -> list:
        """One flag per affine layer: apply ReLU after it."""
        h = self.hidden_layers
        flags = [True] * (h - 1) + [h == 1] + [False]
        return flags


@dataclass
class Network:
    spec: NetworkSpec
    weights: list
    biases: list
    in_lo: np.ndarray
    in_hi: np.ndarray
    binary_mask: np.ndarray
    out_shift: np.ndarray
    out_scale: np.ndarray
    output_weights: np.ndarray
    family: str = ""
    history: dict = field(default_factory=dict)

    def copy_params(self):
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 50
    max_epochs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0:
            raise ValueError("batch_size and patience must be >= 1, max_epochs >= 0")


@dataclass
class LabeledExample:
    features: np.ndarray
    label: np.ndarray


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, float))
        self.labels = np.asarray(self.labels, float)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in row count")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def feature_len(self) -> int:
        return self.features.shape[1]

    @property
    def label_len(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], dict(self.meta))

    def __iter__(self):
        for f, y in zip(self.features, self.labels):
            yield LabeledExample(f, y)


# ---------------------------------------------------------------- features

def featurize_sslp(capacities, x) -> np.ndarray:
    capacities = np.asarray(capacities, float)
    x = np.asarray(x, float)
    if capacities.shape != x.shape or capacities.ndim != 1:
        raise ValueError(f"capacities and x differ in length ({capacities.size} vs {x.size})")
    return np.concatenate([capacities, x])


def featurize_smkp(h, T, x) -> np.ndarray:
    """``h + T x``; SMKP instances store ``W y >= h - T x``, so pass ``-T``."""
    h = np.asarray(h, float)
    T = np.atleast_2d(np.asarray(T, float))
    x = np.asarray(x, float)
    if T.shape != (h.size, x.size):
        raise ValueError(f"T has shape {T.shape}, expected {(h.size, x.size)}")
    return h + T @ x


# ---------------------------------------------------------------- dataset files

def save_dataset(ds: Dataset, path) -> None:
    path = str(path)
    if path.endswith(".csv"):
        header = f"{ds.feature_len},{ds.label_len},{len(ds)}"
        np.savetxt(path, np.hstack([ds.features, ds.labels]), delimiter=",", fmt="%.17g",
                   header=header, comments="")
    else:
        with open(path, "wb") as fh:
            np.savez(fh, features=ds.features, labels=ds.labels,
                     meta=np.array(json.dumps(ds.meta)))


def load_dataset(path) -> Dataset:
    path = str(path)
    if path.endswith(".csv"):
        with open(path) as fh:
            header = fh.readline().strip().lstrip("#").strip()
            f_len, l_len, count = (int(v) for v in header.split(","))
            rows = np.loadtxt(fh, delimiter=",", ndmin=2)
        if rows.shape != (count, f_len + l_len):
            raise ValueError(f"{path}: header promises {count} x {f_len + l_len}, found {rows.shape}")
        return Dataset(rows[:, :f_len], rows[:, f_len:])
    with np.load(path) as data:
        return Dataset(data["features"], data["labels"], json.loads(str(data["meta"])))


# ---------------------------------------------------------------- network

def init_network(spec: NetworkSpec, train_set: Dataset | None = None, binary_mask=None,
                 seed: int = 0, family: str = "") -> Network:
    """He-initialized network with scaling metadata fitted on ``train_set``."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes()
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    F, K = spec.input_len, spec.output_len
    mask = np.zeros(F, bool) if binary_mask is None else np.asarray(binary_mask, bool)
    in_lo, in_hi = np.zeros(F), np.ones(F)
    shift, scale = np.zeros(K), np.ones(K)
    out_w = np.ones(K)
    if train_set is not None:
        X, Y = train_set.features, train_set.labels
        in_lo = np.where(mask, 0.0, X.min(axis=0))
        in_hi = np.where(mask, 1.0, X.max(axis=0))
        in_hi = np.where(in_hi > in_lo, in_hi, in_lo + 1.0)
        # median and MAD: heavy tails (penalty-laden labels) should not set the unit
        shift = np.median(Y, axis=0)
        scale = np.median(np.abs(Y - shift), axis=0)
        spread = Y.std(axis=0)
        # a MAD that is only rounding residue (mostly-zero outputs) falls back to sd
        scale = np.where(scale > 1e-6 * spread, scale,
                         np.where(spread > 0, spread, np.maximum(np.abs(shift), 1.0)))
        if K > 1:
            out_w = 1.0 / np.maximum(np.abs(Y).mean(axis=0), 1e-12)
    return Network(spec, weights, biases, in_lo, in_hi, mask, shift, scale, out_w, family)


def scale_inputs(net: Network, X) -> np.ndarray:
    return (np.asarray(X, float) - net.in_lo) / (net.in_hi - net.in_lo)


def _forward_raw(net: Network, Z, keep=False):
    acts = [Z]
    for W, b, relu in zip(net.weights, net.biases, net.spec.relu_mask()):
        Z = Z @ W + b
        if relu:
            Z = np.maximum(Z, 0.0)
        acts.append(Z)
    return acts if keep else Z


def forward(net: Network, features) -> np.ndarray:
    """Prediction for one feature vector (shape ``(F,)``) or a batch ``(B, F)``."""
    X = np.asarray(features, float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != net.spec.input_len:
        raise ValueError(f"expected {net.spec.input_len} features, got {X.shape[1]}")
    out = _forward_raw(net, scale_inputs(net, X)) * net.out_scale + net.out_shift
    return out[0] if single else out


def weighted_l1(net: Network, X, Y) -> float:
    pred = forward(net, np.atleast_2d(X))
    return float(np.mean(np.abs(pred - Y) @ net.output_weights))


def loss_and_grad(net: Network, X, Y):
    """Weighted L1 loss on a batch and its gradient w.r.t. weights and biases.

    The subgradient of ``|r|`` at ``r = 0`` is taken as 0.
    """
    Z0 = scale_inputs(net, X)
    acts = _forward_raw(net, Z0, keep=True)
    pred = acts[-1] * net.out_scale + net.out_shift
    resid = pred - Y
    B = len(X)
    loss = float(np.mean(np.abs(resid) @ net.output_weights))
    delta = np.sign(resid) * net.output_weights * net.out_scale / B
    relu = net.spec.relu_mask()
    gW = [None] * len(net.weights)
    gb = [None] * len(net.biases)
    for i in range(len(net.weights) - 1, -1, -1):
        if relu[i]:
            delta = delta * (acts[i + 1] > 0.0)
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = delta @ net.weights[i].T
    return loss, gW, gb


def train(train_set: Dataset, val_set: Dataset, spec: NetworkSpec, config: TrainConfig | None = None,
          binary_mask=None, family: str = "", log=None) -> Network:
    """Adam on weighted L1 with early stopping on the validation loss."""
    config = config or TrainConfig()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be nonempty")
    if train_set.label_len != spec.output_len or val_set.label_len != spec.output_len:
        raise ValueError("label length does not match the network output length")
    if train_set.feature_len != spec.input_len:
        raise ValueError("feature length does not match the network input length")
    net = init_network(spec, train_set, binary_mask, config.seed, family)
    rng = np.random.default_rng(config.seed + 1)
    X, Y = train_set.features, train_set.labels
    params = net.weights + net.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.eps
    step = 0
    best = weighted_l1(net, val_set.features, val_set.labels)
    best_params = net.copy_params()
    best_epoch = 0
    history = {"train": [], "val": []}
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(X))
        total = 0.0
        for lo in range(0, len(X), config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            loss, gW, gb = loss_and_grad(net, X[idx], Y[idx])
            total += loss * len(idx)
            step += 1
            corr1 = 1.0 - b1 ** step
            corr2 = 1.0 - b2 ** step
            for k, g in enumerate(gW + gb):
                m[k] *= b1
                m[k] += (1.0 - b1) * g
                v[k] *= b2
                v[k] += (1.0 - b2) * g * g
                params[k] -= lr * (m[k] / corr1) / (np.sqrt(v[k] / corr2) + eps)
        train_loss = total / len(X)
        val_loss = weighted_l1(net, val_set.features, val_set.labels)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDivergedError(epoch)
        history["train"].append(train_loss)
        history["val"].append(val_loss)
        if log is not None:
            log(epoch, train_loss, val_loss)
        if val_loss < best:
            best, best_epoch = val_loss, epoch
            best_params = net.copy_params()
        elif epoch - best_epoch >= config.patience:
            break
    net.weights, net.biases = best_params
    history["best_epoch"] = best_epoch
    history["best_val"] = best
    net.history = history
    return net


def abs_relative_error(net: Network, ds: Dataset) -> np.ndarray:
    """Average absolute relative error per output (in percent)."""
    pred = forward(net, ds.features)
    denom = np.maximum(np.abs(ds.labels), 1e-12)
    return 100.0 * np.mean(np.abs(pred - ds.labels) / denom, axis=0)


def normalized_l1_error(net: Network, ds: Dataset) -> np.ndarray:
    """Per-output ``mean|pred - y| / mean|y|`` in percent.

    Dual aggregates are often exactly zero, which makes the per-example
    relative error meaningless; this ratio stays finite.
    """
    pred = forward(net, ds.features)
    denom = np.maximum(np.mean(np.abs(ds.labels), axis=0), 1e-12)
    return 100.0 * np.mean(np.abs(pred - ds.labels), axis=0) / denom


# ---------------------------------------------------------------- persistence

def network_to_dict(net: Network) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "family": net.family,
        "spec": asdict(net.spec),
        "scaling": {
            "in_lo": net.in_lo.tolist(),
            "in_hi": net.in_hi.tolist(),
            "binary_mask": net.binary_mask.astype(int).tolist(),
            "out_shift": net.out_shift.tolist(),
            "out_scale": net.out_scale.tolist(),
        },
        "output_weights": net.output_weights.tolist(),
        "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(net.weights, net.biases)],
    }


def network_from_dict(data: dict) -> Network:
    if not isinstance(data, dict) or data.get("format") != FORMAT:
        raise CorruptModelError("not a network file")
    if data.get("version") != VERSION:
        raise ModelVersionError(f"file version {data.get('version')!r}, supported {VERSION}")
    try:
        spec = NetworkSpec(**data["spec"])
        sc = data["scaling"]
        weights = [np.array(layer["W"], float) for layer in data["layers"]]
        biases = [np.array(layer["b"], float) for layer in data["layers"]]
        net = Network(spec, weights, biases, np.array(sc["in_lo"], float), np.array(sc["in_hi"], float),
                      np.array(sc["binary_mask"], bool), np.array(sc["out_shift"], float),
                      np.array(sc["out_scale"], float), np.array(data["output_weights"], float),
                      data.get("family", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModelError(f"malformed network file: {exc}") from exc
    sizes = spec.layer_sizes()
    shapes_ok = len(weights) == len(sizes) - 1 and all(
        W.shape == (a, b) and bb.shape == (b,)
        for W, bb, a, b in zip(weights, biases, sizes[:-1], sizes[1:]))
    if not shapes_ok or net.in_lo.shape != (spec.input_len,) or net.out_shift.shape != (spec.output_len,):
        raise CorruptModelError("layer shapes disagree with the stored spec")
    return net


def save_network(net: Network, path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh)


def load_network(path, family: str | None = None, spec: NetworkSpec | None = None) -> Network:
    """Load a network; ``family``/``spec`` guard against mixing up predictors."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorruptModelError(f"{path}: {exc}") from exc
    net = network_from_dict(data)
    if family is not None and net.family != family:
        raise ModelSpecMismatchError(f"{path} holds a {net.family!r} network, expected {family!r}")
    if spec is not None and net.spec != spec:
        raise ModelSpecMismatchError(f"{path} holds spec {net.spec}, expected {spec}")
    return net
