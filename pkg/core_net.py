"""
Explanation Lab - Core Network
Dense feedforward classifier g: R^d -> R^K with forward evaluation, input
gradients, Hessian-vector products by double backpropagation, dense input
Hessians, seeded initialisation, mini-batch SGD training and the weights file
format.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

import autodiff as ad
from artifacts import atomic_write_bytes, atomic_write_text
from datasets import LabeledDataset
from errors import (
    AsymmetricMatrixError,
    ClassIndexError,
    DimensionError,
    DimensionGuardError,
    EmptyDatasetError,
    LabelRangeError,
    NonSmoothNetworkError,
    WeightsFileError,
)

logger = logging.getLogger(__name__)

HESSIAN_MAX_DIM = 512
HESSIAN_SYMMETRY_TOL = 1e-8


class ActivationKind(Enum):
    RELU = "relu"
    SOFTPLUS = "softplus"


@dataclass(frozen=True)
class Activation:
    """Hidden nonlinearity; softplus carries its sharpness beta"""
    kind: ActivationKind
    beta: Optional[float] = None

    def __post_init__(self):
        if self.kind == ActivationKind.SOFTPLUS:
            if self.beta is None or not self.beta > 0:
                raise ValueError(f"softplus needs beta > 0, got {self.beta}")
        elif self.beta is not None:
            raise ValueError("relu takes no beta")

    @classmethod
    def relu(cls) -> "Activation":
        return cls(ActivationKind.RELU)

    @classmethod
    def softplus(cls, beta: float) -> "Activation":
        return cls(ActivationKind.SOFTPLUS, float(beta))

    @property
    def smooth(self) -> bool:
        return self.kind == ActivationKind.SOFTPLUS

    def apply(self, z: ad.Variable) -> ad.Variable:
        if self.smooth:
            return ad.softplus(z, self.beta)
        return ad.relu(z)

    def derivative(self, z: ad.Variable) -> ad.Variable:
        """Elementwise activation derivative; a constant 0/1 mask for relu"""
        if self.smooth:
            return ad.sigmoid(z, self.beta)
        z = ad.as_variable(z)
        return ad.Variable((z.value > 0).astype(np.float64))

    def describe(self) -> str:
        return f"softplus_{self.beta:g}" if self.smooth else "relu"


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weights, bias = _frozen(self.weights), _frozen(self.bias)
        if weights.ndim != 2:
            raise DimensionError(f"weights must be 2-D (out x in), got shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} does not match {weights.shape[0]} outputs")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Network:
    """Affine layers with one hidden activation; no activation after the last layer"""
    layers: Tuple[DenseLayer, ...]
    hidden_activation: Activation
    num_classes: int

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for index in range(1, len(layers)):
            if layers[index].in_dim != layers[index - 1].out_dim:
                raise DimensionError(
                    f"input dimension {layers[index].in_dim} does not chain to previous output {layers[index - 1].out_dim}",
                    layer_index=index,
                )
        if layers[-1].out_dim != self.num_classes:
            raise DimensionError(f"final layer has {layers[-1].out_dim} outputs, expected K={self.num_classes}",
                                 layer_index=len(layers) - 1)
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def layer_sizes(self) -> List[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]


@dataclass
class ForwardTrace:
    """activations[l] is the input x^l of layer l, so activations[0] is x"""
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]
    logits: np.ndarray


@dataclass
class GraphTrace:
    pre_activations: List[ad.Variable]
    activations: List[ad.Variable]
    logits: ad.Variable


def check_class_index(net: Network, class_index: int) -> None:
    if not 0 <= int(class_index) < net.num_classes:
        raise ClassIndexError(f"class index {class_index} outside [0, {net.num_classes})")


def forward_graph(net: Network, x: ad.Variable, weights: Optional[Sequence[Tuple[ad.Variable, ad.Variable]]] = None) -> GraphTrace:
    """Forward pass in Variable ops. ``x`` is (d,) or a batch (n, d).

    ``weights`` substitutes (W, b) pairs, used by training to differentiate
    with respect to the parameters.
    """
    x = ad.as_variable(x)
    pre_activations: List[ad.Variable] = []
    activations: List[ad.Variable] = []
    current = x
    for index, layer in enumerate(net.layers):
        if current.ndim not in (1, 2) or current.shape[-1] != layer.in_dim:
            raise DimensionError(f"expected input of dimension {layer.in_dim}, got shape {current.shape}",
                                 layer_index=index)
        W, b = (layer.weights, layer.bias) if weights is None else weights[index]
        activations.append(current)
        z = ad.matmul(current, ad.transpose(W)) + b
        pre_activations.append(z)
        current = net.hidden_activation.apply(z) if index < net.depth - 1 else z
    return GraphTrace(pre_activations, activations, current)


def forward(net: Network, x: np.ndarray) -> ForwardTrace:
    with ad.no_grad():
        trace = forward_graph(net, ad.Variable(x))
    return ForwardTrace(
        pre_activations=[z.value for z in trace.pre_activations],
        activations=[a.value for a in trace.activations],
        logits=trace.logits.value,
    )


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    return forward(net, x).logits


def class_score(logits: ad.Variable, class_index: int) -> ad.Variable:
    """g_k, summed over the batch for batched logits"""
    score = logits[..., int(class_index)]
    return score.sum() if score.ndim else score


def grad_input(net: Network, x: np.ndarray, class_index: int) -> np.ndarray:
    check_class_index(net, class_index)
    x_var = ad.Variable(x, requires_grad=True)
    logits = forward_graph(net, x_var).logits
    (gradient,) = ad.grad(class_score(logits, class_index), [x_var])
    return gradient.value


def _require_smooth(net: Network, operation: str) -> None:
    if not net.hidden_activation.smooth:
        raise NonSmoothNetworkError(operation)


def grad_of_grad_loss(net: Network, x: np.ndarray, upstream: np.ndarray, class_index: int) -> np.ndarray:
    """d/dx <upstream, dg_k/dx>, i.e. H(x) @ upstream"""
    _require_smooth(net, "grad_of_grad_loss")
    check_class_index(net, class_index)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != np.shape(x):
        raise DimensionError(f"upstream shape {upstream.shape} does not match input shape {np.shape(x)}")
    x_var = ad.Variable(x, requires_grad=True)
    logits = forward_graph(net, x_var).logits
    (gradient,) = ad.grad(class_score(logits, class_index), [x_var], create_graph=True)
    (hvp,) = ad.grad((gradient * upstream).sum(), [x_var])
    return hvp.value


def hessian(net: Network, x: np.ndarray, class_index: int) -> np.ndarray:
    _require_smooth(net, "hessian")
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    if d > HESSIAN_MAX_DIM:
        raise DimensionGuardError(f"dense Hessian limited to d <= {HESSIAN_MAX_DIM}, got d={d}")
    check_class_index(net, class_index)
    # one graph, d backward passes over it
    x_var = ad.Variable(x, requires_grad=True)
    logits = forward_graph(net, x_var).logits
    (gradient,) = ad.grad(class_score(logits, class_index), [x_var], create_graph=True)
    columns = []
    for i in range(d):
        basis = np.zeros(d)
        basis[i] = 1.0
        (column,) = ad.grad(gradient, [x_var], grad_output=basis)
        columns.append(column.value)
    H = np.stack(columns, axis=1)
    asymmetry = float(np.max(np.abs(H - H.T))) if d else 0.0
    if asymmetry >= HESSIAN_SYMMETRY_TOL:
        raise AsymmetricMatrixError(asymmetry, HESSIAN_SYMMETRY_TOL)
    return 0.5 * (H + H.T)


def with_activation(net: Network, act: Activation) -> Network:
    """Same layer objects, different hidden activation"""
    return dataclasses.replace(net, hidden_activation=act)


def init_network(layer_sizes: Sequence[int], activation: Activation, seed: int) -> Network:
    """He-normal weights and zero biases for sizes [d, h1, ..., K]"""
    if len(layer_sizes) < 2:
        raise ValueError(f"need at least input and output sizes, got {list(layer_sizes)}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append(DenseLayer(W, np.zeros(fan_out)))
    return Network(tuple(layers), activation, int(layer_sizes[-1]))


# -- training ---------------------------------------------------------------------------------

class TrainingConfig(BaseModel):
    """Mini-batch SGD settings"""
    epochs: int = Field(10, ge=0, description="Passes over the training set")
    lr: float = Field(0.1, gt=0, description="Fixed learning rate")
    batch_size: int = Field(64, ge=1, description="Mini-batch size")
    seed: int = Field(0, description="Shuffling seed")


@dataclass
class TrainingOutcome:
    network: Network
    train_accuracy: float
    test_accuracy: Optional[float]
    loss_history: List[float] = field(default_factory=list)

    def to_dict(self):
        return {
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "loss_history": self.loss_history,
            "layer_sizes": self.network.layer_sizes,
            "activation": self.network.hidden_activation.describe(),
        }


def _validate_dataset(net: Network, dataset: LabeledDataset) -> None:
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if dataset.images.shape[1] != net.input_dim:
        raise DimensionError(f"dataset dimension {dataset.images.shape[1]} does not match network input {net.input_dim}",
                             layer_index=0)
    if dataset.num_classes != net.num_classes or int(dataset.labels.max()) >= net.num_classes:
        raise LabelRangeError(f"labels must be < K={net.num_classes}; dataset declares {dataset.num_classes} classes, "
                              f"max label {int(dataset.labels.max())}")


def cross_entropy(logits: ad.Variable, labels: np.ndarray, num_classes: int) -> ad.Variable:
    one_hot = np.eye(num_classes)[labels]
    picked = (logits * one_hot).sum(axis=1)
    return (ad.logsumexp(logits, axis=1) - picked).mean()


def accuracy(net: Network, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    predictions = np.argmax(predict(net, dataset.images), axis=1)
    return float(np.mean(predictions == dataset.labels))


def fit(net: Network, dataset: LabeledDataset, config: TrainingConfig,
        test_dataset: Optional[LabeledDataset] = None) -> TrainingOutcome:
    """Train with softmax cross-entropy and plain SGD; deterministic for a fixed seed"""
    _validate_dataset(net, dataset)
    rng = np.random.default_rng(config.seed)
    params = [(np.array(layer.weights), np.array(layer.bias)) for layer in net.layers]
    history: List[float] = []
    n = len(dataset)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            variables = [(ad.Variable(W, requires_grad=True), ad.Variable(b, requires_grad=True)) for W, b in params]
            logits = forward_graph(net, ad.Variable(dataset.images[batch]), weights=variables).logits
            loss = cross_entropy(logits, dataset.labels[batch], net.num_classes)
            flat = [v for pair in variables for v in pair]
            grads = ad.grad(loss, flat)
            for index, (W, b) in enumerate(params):
                W -= config.lr * grads[2 * index].value
                b -= config.lr * grads[2 * index + 1].value
            epoch_loss += loss.item() * len(batch)
        history.append(epoch_loss / n)
        logger.info(f"epoch {epoch + 1}/{config.epochs}: loss {history[-1]:.5f}")

    trained = Network(tuple(DenseLayer(W, b) for W, b in params), net.hidden_activation, net.num_classes)
    outcome = TrainingOutcome(
        network=trained,
        train_accuracy=accuracy(trained, dataset),
        test_accuracy=accuracy(trained, test_dataset) if test_dataset is not None else None,
        loss_history=history,
    )
    logger.info(f"training done: train accuracy {outcome.train_accuracy:.4f}, test accuracy {outcome.test_accuracy}")
    return outcome


def train(net: Network, dataset: LabeledDataset, config: TrainingConfig) -> Network:
    return fit(net, dataset, config).network


# -- weights file ---------------------------------------------------------------------------

def _blob_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".bin")


def save_weights(net: Network, path: Union[str, Path]) -> Path:
    """Write ``<path>`` (JSON manifest) and the sibling ``.bin`` blob (little-endian f64, per layer W then b)"""
    manifest_path = Path(path)
    blob_path = _blob_path(manifest_path)
    blob = b"".join(
        np.ascontiguousarray(part, dtype="<f8").tobytes()
        for layer in net.layers for part in (layer.weights, layer.bias)
    )
    manifest = {
        "layer_sizes": net.layer_sizes,
        "activation": net.hidden_activation.kind.value,
        "beta": net.hidden_activation.beta,
        "num_classes": net.num_classes,
        "endianness": "little",
        "dtype": "f64",
        "blob": blob_path.name,
    }
    atomic_write_bytes(blob_path, blob)
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_weights(path: Union[str, Path]) -> Network:
    manifest_path = Path(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise WeightsFileError(f"cannot read weights manifest {manifest_path}: {str(e)}") from e

    if manifest.get("endianness") != "little" or manifest.get("dtype") != "f64":
        raise WeightsFileError(f"unsupported encoding {manifest.get('endianness')}/{manifest.get('dtype')}")
    sizes = [int(s) for s in manifest.get("layer_sizes", [])]
    if len(sizes) < 2:
        raise WeightsFileError(f"layer_sizes must list at least two sizes, got {sizes}")

    blob_path = manifest_path.parent / manifest.get("blob", _blob_path(manifest_path).name)
    try:
        blob = blob_path.read_bytes()
    except OSError as e:
        raise WeightsFileError(f"cannot read weights blob {blob_path}: {str(e)}") from e
    expected = 8 * sum(n_out * n_in + n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))
    if len(blob) != expected:
        raise WeightsFileError(f"weights blob {blob_path.name} has {len(blob)} bytes, expected {expected}")

    values = np.frombuffer(blob, dtype="<f8")
    layers, offset = [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        W = values[offset:offset + n_out * n_in].reshape(n_out, n_in)
        offset += n_out * n_in
        b = values[offset:offset + n_out]
        offset += n_out
        layers.append(DenseLayer(W, b))

    try:
        kind = ActivationKind(manifest["activation"])
        activation = Activation.relu() if kind == ActivationKind.RELU else Activation.softplus(manifest["beta"])
    except (KeyError, TypeError, ValueError) as e:
        raise WeightsFileError(f"invalid activation in weights manifest {manifest_path}: {str(e)}") from e
    return Network(tuple(layers), activation, int(manifest.get("num_classes", sizes[-1])))
