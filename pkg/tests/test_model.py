import math

import numpy as np
import pytest

from fdcheck import model_gradient_errors, toy_batch
from mcan.attention import CASTS, COMPRESSIONS
from mcan.model import (
    MCAN,
    PROFILES,
    ModelConfig,
    binary_cross_entropy,
    comparison_vector,
    highway_layer,
    l2_penalty,
    load_checkpoint,
    loss,
    lstm_encode,
    meanmax_pool,
    parameter_count,
    save_checkpoint,
)
from mcan.tensor import MaskError, ShapeError, Tensor
from mcan.text import Vocabulary


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def small_model(seed=0, vocab_size=10, **overrides):
    fields = dict(embed_dim=5, hidden=4, head=3, fm_k=2, dropout=0.2)
    fields.update(overrides)
    config = ModelConfig(**fields)
    rng = np.random.default_rng(seed)
    embeddings = rng.normal(0.0, 0.5, size=(vocab_size, config.embed_dim))
    embeddings[0] = 0.0
    return MCAN.create(config, embeddings, seed=seed)


class TestHighway:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x = rng.normal(size=(4, 3))
        self.W_H, self.W_T = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        self.b_H = rng.normal(size=3)

    def test_open_gate_gives_transform(self):
        y = highway_layer(T(self.x), T(self.W_H), T(self.b_H), T(self.W_T), T(np.full(3, 100.0))).data
        np.testing.assert_allclose(y, np.maximum(self.x @ self.W_H + self.b_H, 0.0), rtol=0, atol=1e-12)

    def test_closed_gate_carries_input(self):
        y = highway_layer(T(self.x), T(self.W_H), T(self.b_H), T(self.W_T), T(np.full(3, -100.0))).data
        np.testing.assert_allclose(y, self.x, rtol=0, atol=1e-12)

    def test_direct_formula(self):
        b_T = np.array([0.1, -0.2, 0.3])
        y = highway_layer(T(self.x), T(self.W_H), T(self.b_H), T(self.W_T), T(b_T)).data
        h = np.maximum(self.x @ self.W_H + self.b_H, 0.0)
        t = 1.0 / (1.0 + np.exp(-(self.x @ self.W_T + b_T)))
        np.testing.assert_allclose(y, h * t + (1 - t) * self.x, rtol=0, atol=1e-12)
        low, high = np.minimum(h, self.x), np.maximum(h, self.x)
        assert np.all((low - 1e-12 <= y) & (y <= high + 1e-12))

    def test_width_change_projects_carry(self):
        rng = np.random.default_rng(1)
        W_H, W_T, W_P = (rng.normal(size=(3, 2)) for _ in range(3))
        y = highway_layer(T(self.x), T(W_H), T(np.zeros(2)), T(W_T), T(np.full(2, -100.0)), T(W_P), T(np.zeros(2)))
        np.testing.assert_allclose(y.data, np.maximum(self.x @ W_P, 0.0), rtol=0, atol=1e-12)

    def test_width_change_without_projection(self):
        with pytest.raises(ShapeError):
            highway_layer(T(self.x), T(np.ones((3, 2))), T(np.zeros(2)), T(np.ones((3, 2))), T(np.zeros(2)))


class TestLSTM:
    def test_zero_weights_zero_states(self):
        h = lstm_encode(T(np.zeros((2, 3, 4))), None, T(np.zeros((4, 8))), T(np.zeros((2, 8))), T(np.zeros(8)))
        np.testing.assert_array_equal(h.data, np.zeros((2, 3, 2)))

    def test_single_step_by_hand(self):
        x = 0.5
        W = np.array([[0.1, 0.2, 0.3, 0.4]])  # input, forget, output, candidate
        b = np.array([0.01, 0.02, 0.03, 0.04])
        h = lstm_encode(T([[[x]]]), None, T(W), T(np.full((1, 4), 0.7)), T(b)).data
        i = sigmoid(0.1 * x + 0.01)
        o = sigmoid(0.3 * x + 0.03)
        g = math.tanh(0.4 * x + 0.04)
        c = i * g  # the forget gate multiplies the zero initial cell
        assert abs(h[0, 0, 0] - o * math.tanh(c)) < 1e-12

    def test_trailing_padding_keeps_state(self):
        rng = np.random.default_rng(0)
        W, U, b = T(rng.normal(size=(3, 8))), T(rng.normal(size=(2, 8))), T(rng.normal(size=8))
        x = rng.normal(size=(1, 3, 3))
        short = lstm_encode(T(x), None, W, U, b).data
        padded_x = np.concatenate([x, np.zeros((1, 2, 3))], axis=1)
        mask = np.array([[1, 1, 1, 0, 0]], bool)
        padded = lstm_encode(T(padded_x), mask, W, U, b).data
        np.testing.assert_array_equal(padded[:, :3], short)
        np.testing.assert_array_equal(padded[:, 3], short[:, 2])
        np.testing.assert_array_equal(padded[:, 4], short[:, 2])

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            lstm_encode(T(np.zeros((1, 2, 3))), None, T(np.zeros((4, 8))), T(np.zeros((2, 8))), T(np.zeros(8)))


class TestPoolingAndHead:
    def test_single_state(self):
        h = np.array([[[1.0, -2.0]]])
        np.testing.assert_array_equal(meanmax_pool(T(h)).data, [[1.0, -2.0, 1.0, -2.0]])

    def test_two_states(self):
        h = np.array([[[1.0, 4.0], [3.0, -2.0], [9.0, 9.0]]])
        out = meanmax_pool(T(h), [[True, True, False]]).data
        np.testing.assert_array_equal(out, [[2.0, 1.0, 3.0, 4.0]])

    def test_empty(self):
        with pytest.raises(MaskError):
            meanmax_pool(T(np.ones((1, 2, 3))), [[False, False]])

    def test_comparison_vector(self):
        x = np.array([[1.0, 2.0, 3.0]])
        v = comparison_vector(T(x), T(x)).data
        assert v.shape == (1, 12)
        np.testing.assert_array_equal(v[:, 9:], np.zeros((1, 3)))

    def test_comparison_width_mismatch(self):
        with pytest.raises(ShapeError):
            comparison_vector(T(np.ones((1, 3))), T(np.ones((1, 4))))


class TestLoss:
    def test_perfect_prediction(self):
        probs = T([[0.0, 1.0], [1.0, 0.0]])
        assert abs(binary_cross_entropy(probs, [1, 0]).item()) < 1e-11

    def test_coin_flip(self):
        assert abs(loss(T([[0.5, 0.5]]), [1], [], 0.0).item() - math.log(2)) < 1e-15

    def test_zero_parameters_have_no_penalty(self):
        probs = T([[0.5, 0.5]])
        assert loss(probs, [0], [T(np.zeros(3))], 0.5).item() == loss(probs, [0], [], 0.0).item()

    def test_penalty_is_exactly_l2_norm(self):
        rng = np.random.default_rng(0)
        params = [T(rng.normal(size=(3, 2))), T(rng.normal(size=4))]
        probs = T([[0.3, 0.7], [0.9, 0.1]])
        norm = sum(float((p.data**2).sum()) for p in params)
        total = loss(probs, [1, 0], params, 1e-6).item()
        data = loss(probs, [1, 0], params, 0.0).item()
        assert abs(total - data - 1e-6 * norm) < 1e-15
        assert abs(l2_penalty(params).item() - norm) < 1e-12

    def test_log_is_clamped(self):
        value = binary_cross_entropy(T([[1.0, 0.0]]), [1]).item()
        assert math.isfinite(value) and abs(value + math.log(1e-12)) < 1e-9

    @pytest.mark.parametrize("labels", [[2], [-1], [0.5]])
    def test_bad_labels(self, labels):
        with pytest.raises(ValueError):
            binary_cross_entropy(T([[0.5, 0.5]]), labels)

    def test_negative_l2(self):
        with pytest.raises(ValueError):
            loss(T([[0.5, 0.5]]), [1], [], -1.0)


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.hidden, c.head, c.l2, c.dropout, c.fm_k) == (300, 200, 1e-6, 0.2, 10)
        assert c.z_dim == 12 and c.enabled_casts == CASTS

    @pytest.mark.parametrize(
        "field, value",
        [("hidden", 0), ("dropout", 1.0), ("dropout", -0.1), ("compression", "xx"), ("l2", -1.0), ("embed_dim", 0)],
    )
    def test_validation(self, field, value):
        with pytest.raises(ValueError):
            ModelConfig(**{field: value})

    def test_casts_normalized(self):
        assert ModelConfig(enabled_casts=("intra", "align")).enabled_casts == ("align", "intra")
        with pytest.raises(ValueError):
            ModelConfig(enabled_casts=("self",))

    def test_text_round_trip(self):
        c = ModelConfig(embed_dim=7, encoder_dim=5, compression="nn", enabled_casts=("max",), use_lstm=False)
        assert ModelConfig.from_text(c.to_text()) == c

    def test_profiles_are_valid(self):
        for name, fields in PROFILES.items():
            ModelConfig(embed_dim=8, **fields)
        assert PROFILES["trecqa"]["hidden"] == 300 and PROFILES["udc"]["hidden"] == 100


class TestParameters:
    def test_count_formula_random_configs(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            casts = tuple(c for c in CASTS if rng.random() < 0.6)
            config = ModelConfig(
                embed_dim=int(rng.integers(2, 7)),
                encoder_dim=int(rng.integers(2, 7)) if rng.random() < 0.5 else None,
                hidden=int(rng.integers(1, 6)),
                head=int(rng.integers(1, 6)),
                compression=str(rng.choice(COMPRESSIONS)),
                fm_k=int(rng.integers(1, 4)),
                use_highway=bool(rng.random() < 0.7),
                use_lstm=bool(rng.random() < 0.7),
                enabled_casts=casts,
                affinity=str(rng.choice(["factored", "bilinear", "concat"])),
            )
            model = MCAN.create(config, np.zeros((4, config.embed_dim)))
            assert model.num_parameters() == parameter_count(config)

    def test_every_tensor_registered_once(self):
        model = small_model()
        ids = [id(p) for p in model.params.values()]
        assert len(set(ids)) == len(ids)
        assert all(p.name == name for name, p in model.params.items())

    def test_frozen_embeddings_excluded(self):
        model = small_model()
        assert "embedding" not in model.trainable()
        assert "embedding" in small_model(trainable_embeddings=True).trainable()

    def test_embedding_width_checked(self):
        with pytest.raises(ShapeError):
            MCAN.create(ModelConfig(embed_dim=4), np.zeros((3, 5)))


class TestForward:
    def test_probabilities(self):
        model = small_model()
        q_ids, q_mask, d_ids, d_mask, _ = toy_batch(10, np.random.default_rng(1))
        probs = model.forward(q_ids, q_mask, d_ids, d_mask).data
        assert np.all((probs >= 0) & (probs <= 1))
        np.testing.assert_allclose(probs.sum(-1), 1.0, rtol=0, atol=1e-12)

    def test_inference_is_deterministic(self):
        model = small_model()
        batch = toy_batch(10, np.random.default_rng(1))[:4]
        assert model.score(*batch).tobytes() == model.score(*batch).tobytes()

    def test_training_mode_uses_dropout(self):
        model = small_model(dropout=0.5)
        batch = toy_batch(10, np.random.default_rng(1))[:4]
        a = model.forward(*batch, training=True, rng=np.random.default_rng(0)).data
        b = model.forward(*batch, training=True, rng=np.random.default_rng(0)).data
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, model.forward(*batch).data)

    def test_swapping_sides_changes_score(self):
        model = small_model()
        for p in model.params.values():
            p.data = p.data + np.random.default_rng(3).uniform(-0.2, 0.2, size=p.shape)
        q_ids, q_mask, d_ids, d_mask, _ = toy_batch(10, np.random.default_rng(2))
        forward = model.score(q_ids, q_mask, d_ids, d_mask)
        swapped = model.score(d_ids, d_mask, q_ids, q_mask)
        assert np.all(forward != swapped)

    def test_no_highway_passes_embeddings(self):
        model = small_model(use_highway=False)
        ids = np.array([[3, 4, 3]])
        np.testing.assert_array_equal(model.encode_inputs(ids).data, model.embeddings.data[ids])

    def test_same_word_same_encoding(self):
        enc = small_model().encode_inputs(np.array([[3, 4, 3]])).data
        np.testing.assert_array_equal(enc[0, 0], enc[0, 2])

    def test_pad_row_is_zero(self):
        model = small_model(use_highway=False)
        np.testing.assert_array_equal(model.encode_inputs(np.array([[0]])).data, np.zeros((1, 1, 5)))

    @pytest.mark.parametrize("compression", COMPRESSIONS)
    def test_padding_invariance(self, compression):
        model = small_model(compression=compression)
        rng = np.random.default_rng(4)
        q, d = rng.integers(2, 10, size=(1, 3)), rng.integers(2, 10, size=(1, 4))
        base = model.score(q, q != 0, d, d != 0)
        for pq, pd in [(2, 0), (0, 3), (4, 1)]:
            qp, dp = np.pad(q, ((0, 0), (0, pq))), np.pad(d, ((0, 0), (0, pd)))
            padded = model.score(qp, qp != 0, dp, dp != 0)
            assert abs(padded[0] - base[0]) <= 1e-10

    def test_features_widened_to_twelve(self):
        model = small_model(enabled_casts=("max",))
        ids = np.array([[2, 3, 0]])
        zq, zd = model.features(ids, ids != 0, ids, ids != 0)
        assert zq.shape == (1, 3, 12)
        assert np.all(zq[..., :3] == 0) and np.all(zq[..., 6:] == 0)
        assert np.any(zq[0, :2, 3:6] != 0)
        assert np.all(zq[0, 2] == 0)


class TestGradients:
    @pytest.mark.parametrize(
        "overrides",
        [
            dict(affinity="bilinear", compression="nn"),
            dict(affinity="concat", compression="fm", fm_k=2),
            dict(use_highway=False, enabled_casts=("align", "intra")),
            dict(use_lstm=False, encoder_dim=3, compression="sm"),
            dict(trainable_embeddings=True, enabled_casts=("mean",)),
        ],
        ids=["bilinear-nn", "concat-fm", "no-highway", "no-lstm", "trainable-embeddings"],
    )
    def test_end_to_end_variants(self, overrides, monkeypatch):
        fields = dict(embed_dim=4, hidden=3, head=3, compression="sm", l2=1e-3)
        fields.update(overrides)
        errors, margin, _ = model_gradient_errors(ModelConfig(**fields), monkeypatch)
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, (worst, errors[worst], margin)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model(compression="nn", enabled_casts=("align", "max"))
        vocab = Vocabulary(tuple(f"t{i}" for i in range(8)))
        save_checkpoint(tmp_path / "m.mcan", model, vocab)
        loaded, loaded_vocab = load_checkpoint(tmp_path / "m.mcan")
        assert loaded.config == model.config
        assert loaded_vocab.tokens == vocab.tokens
        batch = toy_batch(10, np.random.default_rng(0))[:4]
        assert loaded.score(*batch).tobytes() == model.score(*batch).tobytes()

    def test_bytes_are_reproducible(self, tmp_path):
        vocab = Vocabulary(("a",))
        save_checkpoint(tmp_path / "a.mcan", small_model(vocab_size=3), vocab)
        save_checkpoint(tmp_path / "b.mcan", small_model(vocab_size=3), vocab)
        assert (tmp_path / "a.mcan").read_bytes() == (tmp_path / "b.mcan").read_bytes()

    def test_trainable_embeddings_restored(self, tmp_path):
        model = small_model(trainable_embeddings=True, vocab_size=3)
        model.embeddings.data = model.embeddings.data + 1.0
        save_checkpoint(tmp_path / "m.mcan", model, Vocabulary(("a",)))
        loaded, _ = load_checkpoint(tmp_path / "m.mcan")
        assert loaded.embeddings.data.tobytes() == model.embeddings.data.tobytes()

    def test_state_mismatch(self):
        model = small_model()
        state = model.state_dict()
        state.pop("output.b")
        with pytest.raises(KeyError):
            model.load_state_dict(state)
