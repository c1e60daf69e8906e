"""Unit tests for Adam, the joint objective and the epoch loop."""

from unittest.mock import patch

import numpy as np
import pytest

from errors import DivergenceError, InsufficientUsersError, UsageError
from aggregator.service import aggregate_forward
from datapipe.schemas import SynthSpec
from datapipe.service import generate_synthetic
from encoder.schemas import ModelConfig, ModelVariant
from numkernel.gradcheck import gradient_check
from numkernel.schemas import Parameter
from siamese.service import sample_triplet_batch
from trainer.checkpoint import load_checkpoint
from trainer.model import HeadKind, JointModel, TaskHead
from trainer.schemas import AdamState, TrainConfig
from trainer.service import adam_update, batch_objective, fit, train_step

TINY = ModelConfig(kernel_widths=(3, 3), channels=(2, 2), embedding_dim=8, heads=2, gate_reduction=32)


def _config(**overrides):
    values = dict(
        model=TINY,
        support_size=3,
        positive_size=1,
        negative_size=2,
        batch_size=2,
        max_epochs=2,
        validation_fraction=0.25,
        seed=3,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def archives():
    return generate_synthetic(SynthSpec(n_users=4, days_per_user=6, seed=2))


@pytest.fixture(scope="module")
def by_user(archives):
    return {a.user_id: a for a in archives}


def _history(result):
    return [r.model_dump() for r in result.history]


class TestTrainConfig:
    """Test cases for the optimisation defaults."""

    def test_defaults(self):
        """Test the published parameter settings."""
        config = TrainConfig()
        assert config.embedding_dim == 64
        assert config.support_size == 6
        assert config.positive_size == 2
        assert config.negative_size == 4
        assert config.margin == 1.0
        assert config.batch_size == 64
        assert config.learning_rate == 5e-4
        assert config.lambda_weight == 0.1

    def test_lambda_alias(self):
        """Test that the config key is spelled lambda."""
        assert TrainConfig(**{"lambda": 0.4}).lambda_weight == 0.4
        assert TrainConfig(lambda_weight=0.2).model_dump(by_alias=True)["lambda"] == 0.2

    def test_rejects_bad_values(self):
        """Test size and rate bounds."""
        with pytest.raises(ValueError):
            TrainConfig(support_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)


class TestAdam:
    """Test cases for the Adam update."""

    def test_zero_gradient_keeps_parameters(self):
        """Test that zero gradients never move a parameter."""
        p = Parameter(np.array([1.0, -2.0]))
        state = AdamState.for_parameters({"p": p})
        for _ in range(5):
            adam_update({"p": p}, state, 0.1)
        np.testing.assert_array_equal(p.value, [1.0, -2.0])
        assert state.t == 5

    def test_first_step_moves_by_lr(self):
        """Test that the first bias-corrected step is about lr * sign(g)."""
        p = Parameter(np.array([0.5, 0.5]))
        p.gradient[:] = [3.0, -0.2]
        adam_update({"p": p}, AdamState(), 1e-3)
        np.testing.assert_allclose(p.value, [0.5 - 1e-3, 0.5 + 1e-3], rtol=0, atol=1e-8)
        assert not p.gradient.any()

    def test_scalar_oracle(self):
        """Test several steps against a scalar re-implementation."""
        grads = [0.3, -1.2, 0.7, 0.0, 2.5]
        p = Parameter(np.array([0.1]))
        state = AdamState()
        x, m, v = 0.1, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            p.gradient[:] = g
            adam_update({"p": p}, state, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.value[0] == pytest.approx(x, abs=1e-12)

    def test_nan_gradient_names_parameter(self):
        """Test that a NaN gradient aborts before any update."""
        good, bad = Parameter(np.ones(2)), Parameter(np.ones(2))
        good.gradient[:] = 1.0
        bad.gradient[1] = np.nan
        with pytest.raises(DivergenceError) as exc:
            adam_update({"good": good, "bad": bad}, AdamState(), 0.1)
        assert exc.value.parameter == "bad"
        assert "bad" in exc.value.detail
        np.testing.assert_array_equal(good.value, np.ones(2))


class TestBatchObjective:
    """Test cases for one training step."""

    def _sample(self, by_user, config, seed=0, anchors=("u0", "u1")):
        return sample_triplet_batch(
            by_user,
            list(anchors),
            config.support_size,
            config.positive_size,
            config.negative_size,
            np.random.default_rng(seed),
        )

    def test_empty_batch_rejected(self, by_user):
        """Test that train_step needs anchors."""
        config = _config()
        model = JointModel.initialize(TINY, 0)
        with pytest.raises(UsageError):
            train_step(model, by_user, [], config, np.random.default_rng(0), AdamState())

    def test_first_step_finite_and_decomposes(self, by_user):
        """Test a finite loss whose parts add up."""
        config = _config()
        model = JointModel.initialize(TINY, 0)
        adam = AdamState.for_parameters(model.named_parameters())
        breakdown = train_step(model, by_user, ["u0", "u2"], config, np.random.default_rng(1), adam)
        assert np.isfinite(breakdown.l_joint)
        assert abs(breakdown.l_joint - (breakdown.l_ae + 0.1 * breakdown.l_s)) <= 1e-12
        assert adam.t == 1

    def test_zero_lambda_is_reconstruction(self, by_user):
        """Test that lambda 0 leaves the reconstruction objective."""
        config = _config(lambda_weight=0.0)
        model = JointModel.initialize(TINY, 0)
        breakdown = batch_objective(model, self._sample(by_user, config), config, compute_gradients=False)
        assert breakdown.l_joint == breakdown.l_ae

    def test_single_other_user_fallback(self):
        """Test a batch of one anchor with one other user and few days."""
        archives = generate_synthetic(SynthSpec(n_users=2, days_per_user=3, seed=4))
        by_user = {a.user_id: a for a in archives}
        config = _config()
        model = JointModel.initialize(TINY, 0)
        sample = self._sample(by_user, config, anchors=("u0",))
        assert sample.fallbacks == 1
        breakdown = batch_objective(model, sample, config, compute_gradients=True)
        assert np.isfinite(breakdown.l_joint)

    def test_attention_receives_gradient(self, by_user):
        """Test that an aggregator parameter gets a nonzero gradient on step 1."""
        config = _config()
        model = JointModel.initialize(TINY, 0)
        batch_objective(model, self._sample(by_user, config), config, compute_gradients=True)
        block_grads = [
            p.gradient for name, p in model.aggregator.named_parameters().items() if ".block" in name
        ]
        assert any(g.any() for g in block_grads)

    def test_one_aggregation_path(self, by_user, archives):
        """Test that training and inference aggregate through the same function."""
        config = _config()
        model = JointModel.initialize(TINY, 0)
        with patch("trainer.model.aggregate_forward", wraps=aggregate_forward) as spy:
            train_step(model, by_user, ["u1"], config, np.random.default_rng(0), AdamState())
            assert spy.call_count == 1
            model.embed_user(archives[0].days[:3])
            assert spy.call_count == 2

    def test_no_autoencoder_variant(self, by_user):
        """Test that dropping the reconstruction term leaves the decoder untouched."""
        config = _config(model=TINY.model_copy(update={"variant": ModelVariant.no_autoencoder}))
        model = JointModel.initialize(config.model, 0)
        breakdown = batch_objective(model, self._sample(by_user, config), config, compute_gradients=True)
        assert breakdown.l_ae == 0.0
        assert not any(p.gradient.any() for p in model.decoder.named_parameters().values())

    def test_no_triplet_variant(self, by_user):
        """Test that dropping the triplet term leaves the aggregator untouched."""
        config = _config(model=TINY.model_copy(update={"variant": ModelVariant.no_triplet}))
        model = JointModel.initialize(config.model, 0)
        breakdown = batch_objective(model, self._sample(by_user, config), config, compute_gradients=True)
        assert breakdown.l_s == 0.0 and breakdown.l_joint == breakdown.l_ae
        assert not any(p.gradient.any() for p in model.aggregator.named_parameters().values())

    def test_no_attention_variant(self, by_user):
        """Test that only the pooling head of the aggregator trains without attention."""
        config = _config(model=TINY.model_copy(update={"variant": ModelVariant.no_attention}))
        model = JointModel.initialize(config.model, 0)
        batch_objective(model, self._sample(by_user, config), config, compute_gradients=True)
        named = model.aggregator.named_parameters()
        assert not any(p.gradient.any() for n, p in named.items() if ".block" in n)
        assert named["aggregator.pool.wa"].gradient.any()

    @pytest.mark.parametrize("seed", range(3))
    def test_objective_gradient_check(self, by_user, seed):
        """Test the scaled joint gradient, head included, on a subset of entries."""
        config = _config(lambda_weight=0.7)
        model = JointModel.initialize(TINY, seed)
        bias_rng = np.random.default_rng(100 + seed)
        for block in model.encoder.blocks + model.decoder.blocks:
            # keep fully masked windows off the relu kink
            block.bias.value[:] = bias_rng.normal(scale=0.1, size=block.bias.shape)
        labels = {u: a.labels["chronotype"] for u, a in by_user.items()}
        model.head = TaskHead.build(
            HeadKind.categorical, "chronotype", labels, 8, np.random.default_rng(seed), loss_weight=0.5
        )
        sample = self._sample(by_user, config, seed=seed)
        named = model.named_parameters()
        probed = {
            name: named[name]
            for name in (
                "encoder.block0.kernels",
                "encoder.head.weight",
                "decoder.block1.kernels",
                "aggregator.block1.head0.w1",
                "aggregator.pool.context",
                "head.weight",
            )
        }

        def forward():
            return batch_objective(model, sample, config, compute_gradients=False).l_joint

        def backward():
            batch_objective(model, sample, config, compute_gradients=True)

        report = gradient_check(
            forward, backward, probed, max_elements=6, rng=np.random.default_rng(seed), skip_kinks=True
        )
        model.zero_grad()
        assert report.passed, report.max_relative_error
        assert report.skipped_fraction <= 0.25, report.skipped


class TestFit:
    """Test cases for the epoch loop."""

    def test_deterministic_history(self, archives):
        """Test identical histories from identical runs."""
        first = fit(archives, _config())
        second = fit(archives, _config())
        assert _history(first) == _history(second)
        assert len(first.history) == 2

    def test_needs_two_users(self, archives):
        """Test that one user is rejected."""
        with pytest.raises(InsufficientUsersError):
            fit(archives[:1], _config())

    def test_patience_zero_stops_at_first_non_improvement(self, archives):
        """Test the stopping rule with scripted validation losses."""
        with patch("trainer.service.validation_loss", side_effect=[3.0, 2.0, 2.5, 1.0]):
            result = fit(archives, _config(max_epochs=4, patience=0))
        assert len(result.history) == 3
        assert result.stopped_early
        assert result.best_epoch == 2

    def test_patience_counts_epochs(self, archives):
        """Test that patience 1 tolerates one non-improving epoch."""
        with patch("trainer.service.validation_loss", side_effect=[3.0, 2.5, 2.0, 2.6, 2.7, 1.0]):
            result = fit(archives, _config(max_epochs=6, patience=1))
        assert [r.val_joint for r in result.history] == [3.0, 2.5, 2.0, 2.6, 2.7]

    def test_returns_best_parameters(self, archives):
        """Test that a later, worse epoch does not overwrite the best model."""
        with patch("trainer.service.validation_loss", side_effect=[1.0, 2.0, 3.0]):
            result = fit(archives, _config(max_epochs=3))
        with patch("trainer.service.validation_loss", side_effect=[1.0]):
            reference = fit(archives, _config(max_epochs=1))
        assert result.best_epoch == 1
        for name, value in reference.model.state_dict().items():
            np.testing.assert_array_equal(result.model.state_dict()[name], value)

    def test_max_steps(self, archives):
        """Test that the step budget ends training mid-run without recording the cut epoch."""
        result = fit(archives, _config(max_epochs=10, max_steps=3))
        assert result.steps == 3
        assert len(result.history) == 1

    def test_resume_matches_uninterrupted(self, archives, tmp_path):
        """Test that checkpoint + resume reproduces an uninterrupted run."""
        full = fit(archives, _config(max_epochs=3))
        path = str(tmp_path / "run.ckpt")
        fit(archives, _config(max_epochs=1), checkpoint_path=path)
        resumed = fit(archives, _config(max_epochs=3), checkpoint_path=path, resume_from=path)
        assert _history(resumed) == _history(full)
        for name, value in full.model.state_dict().items():
            np.testing.assert_array_equal(resumed.model.state_dict()[name], value)

    def test_resume_inside_epoch(self, archives, tmp_path):
        """Test that runs cut inside an epoch by the step budget resume exactly."""
        straight = str(tmp_path / "straight.ckpt")
        full = fit(archives, _config(batch_size=1, max_epochs=3, max_steps=7), checkpoint_path=straight)
        assert len(full.history) == 2

        path = str(tmp_path / "run.ckpt")
        first = fit(archives, _config(batch_size=1, max_epochs=3, max_steps=2), checkpoint_path=path)
        assert first.history == []
        assert load_checkpoint(path).state.progress.next_batch == 2
        fit(archives, _config(batch_size=1, max_epochs=3, max_steps=4), checkpoint_path=path, resume_from=path)
        resumed = fit(
            archives, _config(batch_size=1, max_epochs=3, max_steps=7), checkpoint_path=path, resume_from=path
        )

        assert resumed.steps == 7
        assert _history(resumed) == _history(full)
        expected, actual = load_checkpoint(straight), load_checkpoint(path)
        assert actual.state.progress == expected.state.progress
        assert actual.state.rng == expected.state.rng
        for name, value in expected.parameters.items():
            np.testing.assert_array_equal(actual.parameters[name], value)

    def test_divergence_keeps_last_checkpoint(self, archives, tmp_path):
        """Test that a NaN validation loss aborts after the last good epoch's checkpoint."""
        path = str(tmp_path / "run.ckpt")
        with patch("trainer.service.validation_loss", side_effect=[1.0, float("nan")]):
            with pytest.raises(DivergenceError):
                fit(archives, _config(max_epochs=3), checkpoint_path=path)
        assert load_checkpoint(path).state.epoch == 1

    def test_nan_parameter_diverges(self, by_user):
        """Test that a poisoned weight surfaces as divergence."""
        model = JointModel.initialize(TINY, 0)
        model.encoder.head_bias.value[0] = np.nan
        with pytest.raises(DivergenceError):
            train_step(model, by_user, ["u0"], _config(), np.random.default_rng(0), AdamState())
