"""
Tests for learned layer-wise merging.
"""

import numpy as np
import pytest

from mergeforge.core.exceptions import DataError, FitError, StructuralError
from mergeforge.models.dataset import Batch, Examples
from mergeforge.models.model_spec import Activation, ModelSpec
from mergeforge.models.parameters import MergeWeights, ParameterSet, TaskVector
from mergeforge.schemas.config import FitConfig, LossWeighting, OptimizerKind
from mergeforge.services.nn_service import NNService
from mergeforge.services.supermerge_service import MergeObjective, SuperMergeService
from tests.conftest import make_examples, perturbed, task_vectors_for


def weights_for(spec, k, value=0.0):
    return MergeWeights.filled([f"m{i}" for i in range(k)], spec.layer_names, value)


class TestMaterialize:
    """Test theta_p + sum g(w) * tau."""

    def test_zero_weights_give_pretrained(self, tanh_spec, pretrained, fine_tuned):
        """tanh(0) = 0, so the merged model is the pretrained one bit for bit."""
        tvs = task_vectors_for(pretrained, fine_tuned)
        merged = SuperMergeService.materialize(pretrained, tvs, weights_for(tanh_spec, 3))
        assert merged.equals(pretrained)

    def test_identity_gate_unit_weight_gives_fine_tuned(self, tanh_spec, pretrained, fine_tuned):
        tvs = task_vectors_for(pretrained, {"task_00": fine_tuned["task_00"]})
        merged = SuperMergeService.materialize(pretrained, tvs, weights_for(tanh_spec, 1, 1.0), use_tanh=False)
        assert merged.equals(fine_tuned["task_00"])

    def test_tanh_gate(self, tanh_spec, pretrained, fine_tuned):
        """w = atanh(0.5) applies half of the task vector."""
        tvs = task_vectors_for(pretrained, {"task_00": fine_tuned["task_00"]})
        merged = SuperMergeService.materialize(pretrained, tvs, weights_for(tanh_spec, 1, float(np.arctanh(0.5))))
        expected = pretrained.flatten() + 0.5 * tvs[0].flatten()
        np.testing.assert_allclose(merged.flatten(), expected, rtol=1e-6, atol=1e-7)

    def test_row_count_must_match(self, tanh_spec, pretrained, fine_tuned):
        tvs = task_vectors_for(pretrained, fine_tuned)
        with pytest.raises(StructuralError):
            SuperMergeService.materialize(pretrained, tvs, weights_for(tanh_spec, 2))


class TestGradient:
    """Test dL/dw against finite differences."""

    @pytest.mark.parametrize("use_tanh", [True, False])
    def test_gradient_matches_finite_differences(self, use_tanh):
        """Random small instances with k <= 3 agree with central differences."""
        rng = np.random.default_rng(11)
        spec = ModelSpec.mlp(3, [4], 3, Activation.TANH)
        for instance in range(25):
            k = int(rng.integers(1, 4))
            pretrained = NNService.init_params(spec, seed=instance)
            tvs = [
                TaskVector.from_arrays(spec, [rng.normal(scale=0.3, size=d.num_elements) for d in spec.layer_descriptors])
                for _ in range(k)
            ]
            batch = make_examples(spec, 8, seed=instance).as_batch()
            objective = MergeObjective(spec, pretrained, tvs, use_tanh=use_tanh)
            w = rng.normal(scale=0.5, size=(k, spec.num_layers))
            _, grad = objective.loss_and_grad(w, batch)

            h = 1e-4
            numeric = np.zeros_like(w)
            for i in range(k):
                for j in range(spec.num_layers):
                    plus, minus = w.copy(), w.copy()
                    plus[i, j] += h
                    minus[i, j] -= h
                    numeric[i, j] = (objective.loss(plus, batch) - objective.loss(minus, batch)) / (2 * h)
            tolerance = 1e-4 * np.max(np.abs(numeric)) + 1e-7
            assert np.max(np.abs(grad - numeric)) <= tolerance

    def test_zero_task_vector_has_zero_gradient(self, tanh_spec, pretrained, batch):
        zero = TaskVector.from_arrays(tanh_spec, [np.zeros(d.num_elements) for d in tanh_spec.layer_descriptors])
        grad = SuperMergeService.grad_w(pretrained, [zero], weights_for(tanh_spec, 1, 0.3), batch, tanh_spec)
        assert not grad.any()

    def test_grad_shape(self, tanh_spec, pretrained, fine_tuned, batch):
        tvs = task_vectors_for(pretrained, fine_tuned)
        grad = SuperMergeService.grad_w(pretrained, tvs, weights_for(tanh_spec, 3), batch, tanh_spec)
        assert grad.shape == (3, tanh_spec.num_layers)


class TestFit:
    """Test learning W on validation data."""

    @pytest.fixture
    def validation(self, tanh_spec):
        return {
            "task_00": make_examples(tanh_spec, 10, seed=21),
            "task_01": make_examples(tanh_spec, 30, seed=22, id_offset=100),
        }

    def test_trace_starts_at_pretrained_loss(self, tanh_spec, pretrained, fine_tuned, validation):
        """The trace has epochs + 1 entries; the first is the loss of the pretrained model."""
        cfg = FitConfig(epochs=4, batch_size=8, learning_rate=0.05)
        result = SuperMergeService.fit(tanh_spec, pretrained, list(fine_tuned.values()), validation, cfg)
        assert len(result.loss_trace) == 5
        union = np.concatenate([ex.labels for ex in validation.values()])
        assert union.size == 40
        inputs = np.concatenate([ex.inputs for ex in validation.values()])
        expected = NNService.forward(tanh_spec, pretrained, Batch(inputs=inputs, labels=union)).loss.mean_loss
        assert result.loss_trace[0] == pytest.approx(expected, rel=1e-12)
        assert result.weights.model_ids == ("model0", "model1", "model2")

    def test_zero_learning_rate_keeps_weights(self, tanh_spec, pretrained, fine_tuned, validation):
        cfg = FitConfig(epochs=3, batch_size=8, learning_rate=0.0, init_value=0.25)
        result = SuperMergeService.fit(tanh_spec, pretrained, list(fine_tuned.values()), validation, cfg)
        assert (result.weights.w == 0.25).all()
        assert result.loss_trace[0] == pytest.approx(result.loss_trace[-1], rel=1e-12)

    def test_fit_is_deterministic(self, tanh_spec, pretrained, fine_tuned, validation):
        cfg = FitConfig(epochs=3, batch_size=8, learning_rate=0.05, seed=5)
        models = list(fine_tuned.values())
        a = SuperMergeService.fit(tanh_spec, pretrained, models, validation, cfg)
        b = SuperMergeService.fit(tanh_spec, pretrained, models, validation, cfg)
        assert a.weights.equals(b.weights)
        assert a.merged.equals(b.merged)
        assert a.loss_trace == b.loss_trace

    def test_convex_surrogate_descends_monotonically(self):
        """A linear model with the identity gate is convex in w; full-batch gradient descent never goes up."""
        spec = ModelSpec.mlp(3, [], 3)
        pretrained = NNService.init_params(spec, seed=2)
        models = [perturbed(pretrained, 0.5, seed=30 + i) for i in range(2)]
        validation = make_examples(spec, 40, seed=4)
        cfg = FitConfig(
            optimizer=OptimizerKind.SGD, learning_rate=0.02, weight_decay=0.0,
            epochs=30, batch_size=40, use_tanh=False,
        )
        trace = SuperMergeService.fit(spec, pretrained, models, validation, cfg).loss_trace
        for before, after in zip(trace, trace[1:]):
            assert after <= before + 1e-6
        assert trace[-1] < trace[0]

    def test_divergence_raises_fit_error(self, relu_spec):
        """An absurd step size with the identity gate blows up and names the epoch."""
        pretrained = NNService.init_params(relu_spec, seed=0)
        models = [perturbed(pretrained, 0.1, seed=40 + i) for i in range(2)]
        validation = make_examples(relu_spec, 32, seed=8)
        cfg = FitConfig(
            optimizer=OptimizerKind.SGD, learning_rate=1e300, epochs=3, batch_size=8, use_tanh=False,
        )
        with pytest.raises(FitError) as info:
            SuperMergeService.fit(relu_spec, pretrained, models, validation, cfg)
        assert info.value.epoch >= 1

    def test_task_weighting_averages_task_losses(self, tanh_spec, pretrained, fine_tuned, validation):
        """Task-balanced loss is the mean of the per-task losses, whatever the task sizes."""
        cfg = FitConfig(epochs=1, learning_rate=0.0, loss_weighting=LossWeighting.TASKS)
        result = SuperMergeService.fit(tanh_spec, pretrained, list(fine_tuned.values()), validation, cfg)
        per_task = [NNService.forward(tanh_spec, pretrained, ex.as_batch()).loss.mean_loss for ex in validation.values()]
        assert result.loss_trace[0] == pytest.approx(np.mean(per_task), rel=1e-9)

    def test_empty_validation(self, tanh_spec, pretrained, fine_tuned):
        with pytest.raises(DataError):
            SuperMergeService.fit(tanh_spec, pretrained, list(fine_tuned.values()), {}, FitConfig(epochs=1))

    def test_single_task_fit_recovers_fine_tuned(self, toy_trained, toy_suite):
        """With one trained model and default settings the fit takes most of its task vector."""
        task = toy_suite.in_domain_names[0]
        validation = toy_suite.tasks[task].validation
        result = SuperMergeService.fit(
            toy_trained.spec,
            toy_trained.pretrained,
            [toy_trained.fine_tuned[task]],
            {task: validation},
            FitConfig(),
            model_ids=[task],
        )
        assert result.final_loss < result.loss_trace[0]
        assert np.tanh(result.weights.w).mean() >= 0.8
        fine_tuned_accuracy = NNService.evaluate(toy_trained.spec, toy_trained.fine_tuned[task], validation)
        assert NNService.evaluate(toy_trained.spec, result.merged, validation) >= fine_tuned_accuracy - 0.02

    def test_single_solving_task_vector_is_recovered(self):
        """
        A task vector that solves the task on its own is taken nearly whole.

        The pretrained linear model is all zeros and the fine-tuned one is the
        exact labelling rule, so every layer's coefficient should head for 1
        under the default fit settings.
        """
        spec = ModelSpec.mlp(4, [], 3, Activation.IDENTITY)
        rng = np.random.default_rng(13)
        rule_weight = 3.0 * rng.normal(size=(4, 3))
        rule_bias = np.array([1.5, -1.0, 0.5])
        pretrained = ParameterSet.zeros(spec)
        solved = ParameterSet.from_arrays(spec, [rule_weight.reshape(-1), rule_bias])
        inputs = rng.normal(size=(200, 4)).astype(np.float32)
        validation = Examples(
            ids=np.arange(200),
            inputs=inputs,
            labels=np.argmax(inputs.astype(np.float64) @ rule_weight + rule_bias, axis=1),
        )

        result = SuperMergeService.fit(spec, pretrained, [solved], validation, FitConfig())

        assert np.tanh(result.weights.w).mean() >= 0.8
        fine_tuned_accuracy = NNService.evaluate(spec, solved, validation)
        assert NNService.evaluate(spec, result.merged, validation) >= fine_tuned_accuracy - 0.02


class TestWeightsReport:
    """Test merge-weight exports."""

    def test_weights_csv_shape(self, tanh_spec):
        weights = MergeWeights(
            w=np.arctanh(np.array([[0.5, 0.25, 0.0, -0.5], [0.1, 0.2, 0.3, 0.4]])),
            model_ids=("a", "b"),
            layer_names=tuple(tanh_spec.layer_names),
        )
        lines = SuperMergeService.weights_to_csv(weights).splitlines()
        assert lines[0] == "model,fc0.weight,fc0.bias,fc1.weight,fc1.bias"
        assert len(lines) == 3
        assert lines[1].startswith("a,")

    def test_layer_profile(self, tanh_spec):
        weights = MergeWeights(
            w=np.array([[0.5, 0.0, 1.0, 2.0], [1.5, 0.0, 3.0, 2.0]]),
            model_ids=("a", "b"),
            layer_names=tuple(tanh_spec.layer_names),
        )
        profile = SuperMergeService.layer_profile(weights, use_tanh=False)
        assert profile == {"fc0.weight": 1.0, "fc0.bias": 0.0, "fc1.weight": 2.0, "fc1.bias": 2.0}

    def test_trainable_count(self):
        """One weight per (model, layer): eleven models over 192 layers train 2112 numbers."""
        weights = MergeWeights.filled([f"m{i}" for i in range(11)], [f"layer{j}" for j in range(192)], 0.0)
        assert weights.num_trainable == weights.w.size == 2112
