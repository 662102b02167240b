import copy
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from mergeforge.core.exceptions import DataError, NumericError, StructuralError, TrainingError
from mergeforge.models.dataset import Batch, DatasetSplit, Examples
from mergeforge.models.model_spec import Activation, LayerKind, ModelSpec
from mergeforge.models.parameters import Layer, ParameterSet
from mergeforge.schemas.config import OptimizerConfig
from mergeforge.services.optimizer import Optimizer, OptimizerState
from mergeforge.utils.rng import keyed_generator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossValue:
    mean_loss: float
    correct_count: int
    batch_size: int

    @property
    def accuracy(self) -> float:
        return self.correct_count / self.batch_size


@dataclass(frozen=True, eq=False)
class ForwardResult:
    loss: LossValue
    logits: np.ndarray


@dataclass(frozen=True, eq=False)
class TrainingResult:
    params: ParameterSet
    epoch_losses: List[float] = field(default_factory=list)
    epoch_accuracies: List[float] = field(default_factory=list)


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind == Activation.RELU:
        return np.maximum(z, 0.0)
    if kind == Activation.TANH:
        return np.tanh(z)
    return z


def _activation_grad(kind: Activation, z: np.ndarray, a: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if kind == Activation.RELU:
        return upstream * (z > 0.0)
    if kind == Activation.TANH:
        return upstream * (1.0 - a * a)
    return upstream


class Network:
    """
    Float64 forward/backward passes of a ModelSpec over plain flat arrays.

    Parameters arrive as one flat array per layer (any float dtype); all
    arithmetic runs in float64.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    def _shaped(self, arrays: Sequence[np.ndarray]) -> List[np.ndarray]:
        if len(arrays) != self.spec.num_layers:
            raise StructuralError(f"Got {len(arrays)} parameter arrays, spec has {self.spec.num_layers} layers")
        shaped = []
        for descriptor, values in zip(self.spec.layer_descriptors, arrays):
            values = np.asarray(values, dtype=np.float64)
            if values.size != descriptor.num_elements:
                raise StructuralError(
                    f"Layer '{descriptor.name}' has {values.size} values, expected {descriptor.num_elements}"
                )
            shaped.append(values.reshape(descriptor.shape))
        return shaped

    def _run(self, shaped: List[np.ndarray], inputs: np.ndarray, keep: bool):
        h = np.asarray(inputs, dtype=np.float64)
        cache = []
        for descriptor, weight in zip(self.spec.layer_descriptors, shaped):
            h_in = h
            z = h_in @ weight if descriptor.kind == LayerKind.DENSE else h_in + weight
            h = _activate(descriptor.activation, z)
            if not np.isfinite(h).all():
                raise NumericError("Non-finite activation", layer=descriptor.name)
            if keep:
                cache.append((h_in, z, h))
        return h, cache

    def logits(self, arrays: Sequence[np.ndarray], inputs: np.ndarray) -> np.ndarray:
        logits, _ = self._run(self._shaped(arrays), inputs, keep=False)
        return logits

    @staticmethod
    def _loss_terms(logits: np.ndarray, batch: Batch):
        labels = np.asarray(batch.labels, dtype=np.int64)
        log_probs = log_softmax(logits, axis=1)
        per_example = -log_probs[np.arange(labels.shape[0]), labels]
        if batch.weights is None:
            weights = np.full(labels.shape[0], 1.0 / labels.shape[0])
        else:
            raw = np.asarray(batch.weights, dtype=np.float64)
            total = raw.sum()
            if not total > 0.0:
                raise StructuralError("Batch weights must sum to a positive value")
            weights = raw / total
        mean_loss = float(np.dot(weights, per_example))
        correct = int(np.count_nonzero(np.argmax(logits, axis=1) == labels))
        return mean_loss, correct, log_probs, weights, labels

    def loss(self, arrays: Sequence[np.ndarray], batch: Batch) -> Tuple[LossValue, np.ndarray]:
        batch.validate(self.spec)
        logits = self.logits(arrays, batch.inputs)
        mean_loss, correct, _, _, labels = self._loss_terms(logits, batch)
        if not np.isfinite(mean_loss):
            raise NumericError("Non-finite loss")
        return LossValue(mean_loss=mean_loss, correct_count=correct, batch_size=labels.shape[0]), logits

    def loss_and_grad(self, arrays: Sequence[np.ndarray], batch: Batch) -> Tuple[LossValue, List[np.ndarray]]:
        """Mean loss and d(mean loss)/d(parameters), one flat float64 array per layer."""
        batch.validate(self.spec)
        shaped = self._shaped(arrays)
        logits, cache = self._run(shaped, batch.inputs, keep=True)
        mean_loss, correct, log_probs, weights, labels = self._loss_terms(logits, batch)
        if not np.isfinite(mean_loss):
            raise NumericError("Non-finite loss")

        upstream = np.exp(log_probs)
        upstream[np.arange(labels.shape[0]), labels] -= 1.0
        upstream *= weights[:, None]

        grads: List[np.ndarray] = [None] * len(shaped)
        for index in reversed(range(len(shaped))):
            descriptor = self.spec.layer_descriptors[index]
            h_in, z, h = cache[index]
            upstream = _activation_grad(descriptor.activation, z, h, upstream)
            if descriptor.kind == LayerKind.DENSE:
                grads[index] = (h_in.T @ upstream).reshape(-1)
                upstream = upstream @ shaped[index].T
            else:
                grads[index] = upstream.sum(axis=0)

        value = LossValue(mean_loss=mean_loss, correct_count=correct, batch_size=labels.shape[0])
        return value, grads


class NNService:
    """Service layer for the reference network: init, forward, backward, train, evaluate."""

    @staticmethod
    def init_params(spec: ModelSpec, seed: int) -> ParameterSet:
        """He-normal dense weights ahead of ReLU, Xavier-normal otherwise; zero biases."""
        rng = keyed_generator(seed, "init", spec.spec_id)
        descriptors = spec.layer_descriptors
        arrays = []
        for index, descriptor in enumerate(descriptors):
            if descriptor.kind == LayerKind.BIAS:
                arrays.append(np.zeros(descriptor.num_elements, dtype=np.float32))
                continue
            following = descriptor.activation
            if index + 1 < len(descriptors) and descriptors[index + 1].kind == LayerKind.BIAS:
                following = descriptors[index + 1].activation
            if following == Activation.RELU:
                std = np.sqrt(2.0 / descriptor.input_dim)
            else:
                std = np.sqrt(2.0 / (descriptor.input_dim + descriptor.output_dim))
            arrays.append(rng.normal(0.0, std, size=descriptor.num_elements).astype(np.float32))
        return ParameterSet.from_arrays(spec, arrays)

    @staticmethod
    def forward(spec: ModelSpec, params: ParameterSet, batch: Batch) -> ForwardResult:
        params.check_spec(spec)
        value, logits = Network(spec).loss(params.arrays, batch)
        return ForwardResult(loss=value, logits=logits)

    @staticmethod
    def backward(spec: ModelSpec, params: ParameterSet, batch: Batch) -> Tuple[Layer, ...]:
        """d(mean loss)/d(theta) per layer, float64, same layout as the ParameterSet."""
        params.check_spec(spec)
        _, grads = Network(spec).loss_and_grad(params.arrays, batch)
        return tuple(Layer(name, grad) for name, grad in zip(params.names, grads))

    @staticmethod
    def predict(spec: ModelSpec, params: ParameterSet, inputs: np.ndarray) -> np.ndarray:
        params.check_spec(spec)
        return np.argmax(Network(spec).logits(params.arrays, inputs), axis=1)

    @staticmethod
    def evaluate(spec: ModelSpec, params: ParameterSet, examples: Examples) -> float:
        """Accuracy in [0, 1] on a non-empty example set."""
        if len(examples) == 0:
            raise DataError("Cannot evaluate on an empty example set")
        predictions = NNService.predict(spec, params, examples.inputs)
        return float(np.count_nonzero(predictions == examples.labels)) / len(examples)

    @staticmethod
    def train(
        spec: ModelSpec,
        init: ParameterSet,
        data: Union[DatasetSplit, Examples],
        opt: Union[OptimizerConfig, OptimizerState],
        epochs: int,
        seed: int,
        batch_size: int = 32,
        label: str = "model",
    ) -> TrainingResult:
        """
        Mini-batch training from `init`.

        Shuffling is keyed by `seed`, so identical (seed, optimizer, data)
        give bit-identical parameters. Master weights are kept in float64 and
        rounded to float32 on return.
        """
        if epochs < 1:
            raise StructuralError("epochs must be at least 1")
        if batch_size < 1:
            raise StructuralError("batch_size must be at least 1")
        init.check_spec(spec)
        examples = data.train if isinstance(data, DatasetSplit) else data
        if len(examples) == 0:
            raise DataError("Training data is empty")

        state = OptimizerState.from_config(opt) if isinstance(opt, OptimizerConfig) else copy.deepcopy(opt)
        optimizer = Optimizer(state)
        network = Network(spec)
        rng = keyed_generator(seed, "shuffle", label)
        work = [layer.values.astype(np.float64) for layer in init.layers]

        n = len(examples)
        losses: List[float] = []
        accuracies: List[float] = []
        for epoch in range(1, epochs + 1):
            order = rng.permutation(n)
            loss_sum = 0.0
            correct = 0
            for start in range(0, n, batch_size):
                index = order[start:start + batch_size]
                batch = Batch(inputs=examples.inputs[index], labels=examples.labels[index])
                try:
                    value, grads = network.loss_and_grad(work, batch)
                except NumericError as exc:
                    raise TrainingError(f"Training of '{label}' diverged ({exc})", epoch) from exc
                loss_sum += value.mean_loss * value.batch_size
                correct += value.correct_count
                optimizer.step(work, grads)

            if not all(np.isfinite(w).all() for w in work):
                raise TrainingError(f"Training of '{label}' produced non-finite parameters", epoch)
            losses.append(loss_sum / n)
            accuracies.append(correct / n)
            logger.info("train %s epoch %d/%d loss=%.6f acc=%.4f", label, epoch, epochs, losses[-1], accuracies[-1])

        return TrainingResult(
            params=ParameterSet.from_arrays(spec, work),
            epoch_losses=losses,
            epoch_accuracies=accuracies,
        )
