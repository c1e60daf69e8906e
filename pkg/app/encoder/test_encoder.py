"""Unit tests for the gated convolutional autoencoder."""

import math
from datetime import date

import numpy as np
import pytest

from datapipe.schemas import DayLongSeries, SynthSpec
from datapipe.service import generate_synthetic
from encoder.schemas import DayEmbedding, GatingParams, ModelConfig, init_decoder, init_encoder
from encoder.service import (
    NORM_EPS,
    bottleneck_norm,
    bottleneck_norm_backward,
    channel_gate,
    day_backward,
    day_forward,
    decode_day,
    encode_day,
    encoder_forward,
    masked_reconstruction_loss,
    scaled_input,
    temporal_gate,
)
from numkernel.gradcheck import gradient_check
from numkernel.schemas import Parameter

ONE_BLOCK = ModelConfig(
    series_length=32, kernel_widths=(3,), channels=(4,), embedding_dim=8, heads=2
)
TWO_BLOCKS = ModelConfig(
    series_length=32, kernel_widths=(5, 3), channels=(3, 4), embedding_dim=6, heads=2
)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _gate(dim, w1, w2):
    return GatingParams(w1=Parameter(np.asarray(w1, dtype=float)), w2=Parameter(np.asarray(w2, dtype=float)))


def _offset_biases(blocks, rng):
    # zero biases put fully masked windows exactly on the relu kink
    for block in blocks:
        block.bias.value[:] = rng.normal(scale=0.1, size=block.bias.shape)


def _series(config, rng, missing=0.25):
    values = rng.uniform(40.0, 80.0, size=config.series_length)
    mask = (rng.random(config.series_length) >= missing) * 1.0
    return values * mask, mask


def _naive_encoder(x, params):
    """Loop-level re-implementation of the encoder forward pass."""
    h = [[v] for v in x]
    for block in params.blocks:
        w, b = block.kernels.value, block.bias.value
        width, in_ch, out_ch = w.shape
        half = (width - 1) // 2
        steps = len(h)
        conv = [[0.0] * out_ch for _ in range(steps)]
        for s in range(steps):
            for o in range(out_ch):
                acc = b[o]
                for j in range(width):
                    src = s + j - half
                    if 0 <= src < steps:
                        for c in range(in_ch):
                            acc += h[src][c] * w[j, c, o]
                conv[s][o] = max(acc, 0.0)

        def excite(z, gate):
            w1, w2 = gate.w1.value, gate.w2.value
            hidden = [max(sum(w1[i, k] * z[k] for k in range(len(z))), 0.0) for i in range(w1.shape[0])]
            return [_sigmoid(sum(w2[k, i] * hidden[i] for i in range(len(hidden)))) for k in range(w2.shape[0])]

        z = [sum(conv[s][o] for s in range(steps)) / steps for o in range(out_ch)]
        a = excite(z, block.channel_gate)
        gated = [[conv[s][o] * a[o] for o in range(out_ch)] for s in range(steps)]
        z = [sum(gated[s]) / out_ch for s in range(steps)]
        a = excite(z, block.temporal_gate)
        gated = [[gated[s][o] * a[s] for o in range(out_ch)] for s in range(steps)]
        h = [[max(gated[2 * s][o], gated[2 * s + 1][o]) for o in range(out_ch)] for s in range(steps // 2)]
    steps, width = len(h), len(h[0])
    means = [sum(h[s][c] for s in range(steps)) / steps for c in range(width)]
    centred = [[h[s][c] - means[c] for c in range(width)] for s in range(steps)]
    rms = math.sqrt(sum(v * v for row in centred for v in row) / (steps * width) + NORM_EPS)
    flat = [v / rms for row in centred for v in row]
    w, b = params.head_weight.value, params.head_bias.value
    return np.array([math.tanh(b[i] + sum(w[i, k] * flat[k] for k in range(len(flat)))) for i in range(w.shape[0])])


class TestGates:
    """Test cases for channel-wise and temporal-wise gating."""

    def test_zero_weights_halve_input(self):
        """Test that sigmoid(0) = 0.5 scales every entry by half."""
        v = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(channel_gate(v, _gate(2, np.zeros((1, 2)), np.zeros((2, 1)))), v / 2)
        np.testing.assert_array_equal(temporal_gate(v, _gate(3, np.zeros((1, 3)), np.zeros((3, 1)))), v / 2)

    def test_zero_input(self):
        """Test that a zero input stays zero."""
        rng = np.random.default_rng(0)
        params = _gate(2, rng.normal(size=(1, 2)), rng.normal(size=(2, 1)))
        np.testing.assert_array_equal(channel_gate(np.zeros((5, 2)), params), np.zeros((5, 2)))

    def test_channel_gate_direct_formula(self):
        """Test a 2-step x 2-channel case against the direct formula."""
        v = np.array([[1.0, -2.0], [3.0, 0.5]])
        w1 = np.array([[0.4, -0.3]])
        w2 = np.array([[0.7], [-1.2]])
        z = [(1.0 + 3.0) / 2, (-2.0 + 0.5) / 2]
        hidden = max(0.4 * z[0] - 0.3 * z[1], 0.0)
        a = [_sigmoid(0.7 * hidden), _sigmoid(-1.2 * hidden)]
        expected = np.array([[1.0 * a[0], -2.0 * a[1]], [3.0 * a[0], 0.5 * a[1]]])
        out = channel_gate(v, _gate(2, w1, w2))
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_temporal_gate_direct_formula(self):
        """Test a 2-step x 2-channel case against the direct formula."""
        v = np.array([[1.0, -2.0], [3.0, 0.5]])
        w1 = np.array([[0.9, 0.2]])
        w2 = np.array([[0.3], [-0.8]])
        z = [(1.0 - 2.0) / 2, (3.0 + 0.5) / 2]
        hidden = max(0.9 * z[0] + 0.2 * z[1], 0.0)
        a = [_sigmoid(0.3 * hidden), _sigmoid(-0.8 * hidden)]
        expected = np.array([[1.0 * a[0], -2.0 * a[0]], [3.0 * a[1], 0.5 * a[1]]])
        out = temporal_gate(v, _gate(2, w1, w2))
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_constant_in_time_gives_constant_gate(self):
        """Test that constant steps and symmetric params give one gate value."""
        v = np.tile([[1.5, 0.5, 2.0]], (4, 1))
        out = temporal_gate(v, _gate(4, np.full((1, 4), 0.3), np.full((4, 1), 0.5)))
        ratios = out / v
        np.testing.assert_allclose(ratios, ratios[0, 0])

    def test_gated_output_bounded_by_input(self):
        """Test that |gated| <= |input| for random inputs."""
        rng = np.random.default_rng(3)
        for _ in range(20):
            v = rng.normal(size=(6, 4)) * 10
            params = _gate(4, rng.normal(size=(1, 4)), rng.normal(size=(4, 1)))
            assert np.all(np.abs(channel_gate(v, params)) <= np.abs(v))


class TestBottleneckNorm:
    """Test cases for the standardisation in front of the encoder head."""

    def test_centred_unit_rms(self):
        """Test zero channel means and unit RMS over the whole map."""
        h = np.random.default_rng(0).random((6, 3)) * 4.0
        normalized, rms = bottleneck_norm(h)
        np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-12)
        assert np.mean(normalized**2) == pytest.approx(1.0, abs=1e-12)
        assert rms == pytest.approx(np.sqrt(np.mean((h - h.mean(axis=0)) ** 2)))

    def test_channel_offsets_and_scale_ignored(self):
        """Test invariance to per-channel levels and to positive rescaling."""
        rng = np.random.default_rng(1)
        h = rng.random((8, 4))
        shifted = 0.37 * h + rng.normal(size=(1, 4)) * 5.0
        np.testing.assert_allclose(bottleneck_norm(shifted)[0], bottleneck_norm(h)[0], atol=1e-12)

    def test_constant_map_is_zero(self):
        """Test that a map without any temporal pattern standardises to zeros."""
        normalized, _ = bottleneck_norm(np.tile([[0.5, 0.0, 2.0]], (4, 1)))
        np.testing.assert_array_equal(normalized, np.zeros((4, 3)))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        """Test the backward rule by central differences."""
        rng = np.random.default_rng(seed)
        h = Parameter(rng.random((5, 3)))
        probe = rng.normal(size=(5, 3))

        def forward():
            return float(np.sum(bottleneck_norm(h.value)[0] * probe))

        def backward():
            normalized, rms = bottleneck_norm(h.value)
            h.gradient += bottleneck_norm_backward(probe, normalized, rms)

        report = gradient_check(forward, backward, {"h": h})
        assert report.passed, report.max_relative_error


class TestEncodeDecode:
    """Test cases for the full-size encoder and decoder."""

    @pytest.fixture(scope="class")
    def model(self):
        config = ModelConfig()
        rng = np.random.default_rng(7)
        return config, init_encoder(config, rng), init_decoder(config, rng)

    @pytest.fixture(scope="class")
    def series(self):
        rng = np.random.default_rng(1)
        values = rng.uniform(50.0, 90.0, size=1440)
        values[100:300] = 0.0
        return DayLongSeries.from_values("u1", date(2020, 1, 1), values)

    def test_initial_embeddings_not_collinear(self, model):
        """Test that an untrained encoder spreads synthetic days instead of sharing one direction."""
        config, encoder, _ = model
        archives = generate_synthetic(SynthSpec(n_users=4, days_per_user=2, seed=7))
        head_pre, vectors = [], []
        for day in (d for a in archives for d in a.days):
            vector, cache = encoder_forward(scaled_input(day.values, day.mask, config), encoder)
            head_pre.append(cache.head_pre)
            vectors.append(vector / np.linalg.norm(vector))
        units = np.stack(vectors)
        cosines = (units @ units.T)[~np.eye(len(units), dtype=bool)]
        assert np.median(np.abs(head_pre)) > 0.1
        assert cosines.min() < 0.9

    def test_default_architecture(self, model):
        """Test widths, channels and the 5760-wide head."""
        config, encoder, decoder = model
        assert [b.kernels.shape[0] for b in encoder.blocks] == [9, 7, 7, 5, 5]
        assert [b.kernels.shape[2] for b in encoder.blocks] == [32, 64, 64, 128, 128]
        assert encoder.head_weight.shape == (64, 5760)
        assert [b.kernels.shape[0] for b in decoder.blocks] == [5, 5, 7, 7, 9]
        assert [b.kernels.shape[2] for b in decoder.blocks] == [128, 64, 64, 32, 1]
        assert [b.channel_gate is not None for b in decoder.blocks] == [True] * 4 + [False]
        assert encoder.blocks[0].channel_gate.w1.shape == (8, 32)
        assert encoder.blocks[0].temporal_gate.w1.shape == (360, 1440)

    def test_embedding_shape_and_range(self, model, series):
        """Test a 64-vector inside [-1, 1]."""
        config, encoder, _ = model
        embedding = encode_day(series, encoder, config)
        assert embedding.vector.shape == (64,)
        assert np.all(np.abs(embedding.vector) <= 1.0)
        assert (embedding.user_id, embedding.date) == ("u1", date(2020, 1, 1))

    def test_intermediate_shapes(self, model, series):
        """Test the pooled shape after every block."""
        config, encoder, _ = model
        _, cache = encoder_forward(series.values / config.value_scale, encoder)
        pooled = [b.after_temporal.shape[0] // 2 for b in cache.blocks]
        widths = [b.after_temporal.shape[1] for b in cache.blocks]
        assert list(zip(pooled, widths)) == [(720, 32), (360, 64), (180, 64), (90, 128), (45, 128)]

    def test_deterministic(self, model, series):
        """Test bitwise-identical embeddings on repeat."""
        config, encoder, _ = model
        first = encode_day(series, encoder, config).vector
        second = encode_day(series, encoder, config).vector
        assert np.array_equal(first, second)

    def test_round_trip_finite(self, model, series):
        """Test that decode(encode(x)) is 1440 finite values."""
        config, encoder, decoder = model
        reconstruction = decode_day(encode_day(series, encoder, config), decoder)
        assert reconstruction.shape == (1440,)
        assert np.all(np.isfinite(reconstruction))

    def test_zero_embedding_zero_reconstruction(self, model):
        """Test that zero biases map the zero embedding to zeros."""
        _, _, decoder = model
        embedding = DayEmbedding(vector=np.zeros(64), user_id="u1", date=date(2020, 1, 1))
        np.testing.assert_array_equal(decode_day(embedding, decoder), np.zeros(1440))


class TestReconstructionLoss:
    """Test cases for the masked reconstruction loss."""

    def test_worked_example(self):
        """Test 0.25 + 1 = 1.25 with the middle slot masked."""
        loss, grad = masked_reconstruction_loss(
            np.array([1.0, 0.0, 2.0]), np.array([1.0, 0.0, 1.0]), np.array([0.5, 7.0, 1.0])
        )
        assert loss == pytest.approx(1.25)
        assert grad[1] == 0.0
        np.testing.assert_allclose(grad, [-1.0, 0.0, -2.0])

    def test_fully_masked(self):
        """Test that an all-zero mask gives zero loss."""
        loss, grad = masked_reconstruction_loss(np.zeros(4), np.zeros(4), np.arange(4.0))
        assert loss == 0.0
        assert not grad.any()

    def test_masked_values_do_not_matter(self):
        """Test bitwise-equal loss and gradients under masked-slot perturbations."""
        config = ONE_BLOCK
        rng = np.random.default_rng(11)
        encoder, decoder = init_encoder(config, rng), init_decoder(config, rng)
        values, mask = _series(config, rng)
        params = {**encoder.named_parameters(), **decoder.named_parameters()}

        def run(v):
            for p in params.values():
                p.zero_grad()
            day = day_forward(v, mask, encoder, decoder, config)
            day_backward(day, encoder, decoder, np.ones(config.embedding_dim), 1.0)
            return day.loss, {name: p.gradient.copy() for name, p in params.items()}

        base_loss, base_grads = run(values)
        for _ in range(100):
            perturbed = values.copy()
            perturbed[mask == 0.0] = rng.uniform(-1e3, 1e3, size=int((mask == 0.0).sum()))
            loss, grads = run(perturbed)
            assert loss == base_loss
            assert all(np.array_equal(grads[k], base_grads[k]) for k in grads)


class TestSmallVariants:
    """Gradient and oracle checks on shortened 32-step architectures."""

    @pytest.mark.parametrize(
        "config, seed",
        [(ONE_BLOCK, s) for s in range(20)] + [(TWO_BLOCKS, s) for s in range(3)],
    )
    def test_full_graph_gradient_check(self, config, seed):
        """Test encoder + decoder + loss gradients with an embedding probe."""
        rng = np.random.default_rng(seed)
        encoder, decoder = init_encoder(config, rng), init_decoder(config, rng)
        _offset_biases(encoder.blocks + decoder.blocks, rng)
        values, mask = _series(config, rng)
        probe = rng.normal(size=config.embedding_dim)

        def forward():
            day = day_forward(values, mask, encoder, decoder, config)
            return day.loss + float(probe @ day.embedding)

        def backward():
            day = day_forward(values, mask, encoder, decoder, config)
            day_backward(day, encoder, decoder, probe, 1.0)

        params = {**encoder.named_parameters(), **decoder.named_parameters()}
        report = gradient_check(
            forward, backward, params, max_elements=24, rng=np.random.default_rng(seed), skip_kinks=True
        )
        assert report.passed, report.max_relative_error
        assert report.skipped_fraction <= 0.05, report.skipped

    @pytest.mark.parametrize("seed", range(3))
    def test_encoder_matches_loop_oracle(self, seed):
        """Test the vectorised encoder against loop arithmetic."""
        rng = np.random.default_rng(seed)
        encoder = init_encoder(TWO_BLOCKS, rng)
        for block in encoder.blocks:
            block.bias.value[:] = rng.normal(size=block.bias.shape) * 0.1
        x = rng.normal(size=32)
        embedding, _ = encoder_forward(x, encoder)
        np.testing.assert_allclose(embedding, _naive_encoder(x, encoder), rtol=0, atol=1e-9)


class TestModelConfig:
    """Test cases for architecture validation."""

    def test_defaults(self):
        """Test the default bottleneck."""
        config = ModelConfig()
        assert config.bottleneck_steps == 45
        assert config.bottleneck_size == 5760
        assert config.decoder_channels == (128, 64, 64, 32, 1)

    def test_rejects_indivisible_length(self):
        """Test that the series must survive every pooling stage."""
        with pytest.raises(ValueError):
            ModelConfig(series_length=30, kernel_widths=(3, 3), channels=(2, 2))

    def test_rejects_even_width(self):
        """Test that kernel widths are odd."""
        with pytest.raises(ValueError):
            ModelConfig(series_length=32, kernel_widths=(4,), channels=(2,))
