import itertools

import numpy as np
import pytest
import torch

from cxrkit.manifest import NEGATIVE, POSITIVE, ScanRecord
from cxrkit.model import (
    ModelConfig,
    ModelError,
    TrainingConfig,
    TrainingError,
    build_model,
    classification_loss,
    classify,
    extract_embedding,
    l2_penalty,
    load_checkpoint,
    lr_schedule,
    majority_vote,
    predict,
    save_checkpoint,
    train,
)
from cxrkit.segmentation import ModelInput


def make_input(seed=0, size=64, bright=False):
    rng = np.random.default_rng(seed)
    img = rng.random((size, size)).astype(np.float32) * 0.2
    if bright:
        img[size // 4 : size // 2, size // 4 : size // 2] += 0.7
    mask = np.full((size, size), 0.5, dtype=np.float32)
    return ModelInput(channels=np.stack([np.clip(img, 0, 1), mask, np.zeros_like(img)]))


class FakePipeline:
    """Serves prebuilt inputs by scan id; ignores augmentation."""

    def __init__(self, inputs):
        self.inputs = inputs

    def model_input(self, record, epoch=None, global_seed=None, augment=False):
        return self.inputs[record.scan_id]


def separable_dataset(n=8, size=64):
    records, inputs = [], {}
    for i in range(n):
        positive = i % 2 == 0
        sid = f"s{i}"
        records.append(
            ScanRecord(
                scan_id=sid,
                patient_id=f"p{i}",
                label=POSITIVE if positive else NEGATIVE,
                image_path="",
            )
        )
        inputs[sid] = make_input(seed=i, size=size, bright=positive)
    return records, FakePipeline(inputs)


class TestBuildModel:
    def test_tiny_head_widths_give_embedding_dim(self):
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)))
        assert model.embedding_dim == 16

    def test_head_must_have_three_layers_ending_in_two(self):
        with pytest.raises(ModelError):
            ModelConfig("tiny_test_cnn", (64, 16))
        with pytest.raises(ModelError):
            ModelConfig("tiny_test_cnn", (64, 16, 3))

    def test_zero_input_finite_logits(self):
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)))
        zero = ModelInput(channels=np.zeros((3, 64, 64), np.float32))
        score = predict(model, zero)
        assert np.isfinite(score.raw_logits).all()

    def test_same_init_seed_same_first_forward(self):
        x = make_input(seed=7)
        a = predict(build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=5), x)
        b = predict(build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=5), x)
        assert a == b

    def test_missing_pretrained_weights_rejected(self):
        config = ModelConfig("tiny_test_cnn", (64, 16, 2), pretrained_weights="/nonexistent.pt")
        with pytest.raises(ModelError, match="not found"):
            build_model(config)


class TestLrSchedule:
    def test_epoch_one_value(self):
        assert lr_schedule(1e-6, 0.95, 1) == pytest.approx(9.5e-7)

    def test_ratio_exact_per_epoch(self):
        """lr(e) equals lr(e-1) * decay exactly, for every epoch."""
        for decay in (0.95, 0.9, 0.5):
            values = [lr_schedule(1e-6, decay, e) for e in range(12)]
            for prev, cur in zip(values, values[1:]):
                assert cur == prev * decay

    def test_decay_one_is_constant(self):
        assert lr_schedule(1e-3, 1.0, 30) == 1e-3


class TestGradients:
    def test_analytic_matches_central_differences(self):
        """Cross-entropy + L2 gradient check on a 4-sample batch."""
        torch.manual_seed(0)
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=0)
        net = model.net.double()
        x = torch.randn(4, 3, 32, 32, dtype=torch.float64) * 0.2 + 0.3
        y = torch.tensor([0, 1, 0, 1])
        l2 = 1e-2

        def loss_value():
            return classification_loss(net(x), y, net, l2)

        loss = loss_value()
        loss.backward()

        rng = np.random.default_rng(1)
        analytic, numeric = [], []
        h = 1e-6
        for param in net.parameters():
            flat = param.detach().view(-1)
            grad = param.grad.detach().view(-1)
            for idx in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
                original = flat[idx].item()
                flat[idx] = original + h
                plus = loss_value().item()
                flat[idx] = original - h
                minus = loss_value().item()
                flat[idx] = original
                analytic.append(grad[idx].item())
                numeric.append((plus - minus) / (2 * h))
        analytic = np.array(analytic)
        numeric = np.array(numeric)
        rel_error = np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic)
        assert rel_error < 1e-4

    def test_l2_shrinks_parameter_norm_without_data_loss(self):
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=3)
        net = model.net
        opt = torch.optim.Adam(net.parameters(), lr=1e-3)
        norms = []
        for _ in range(5):
            norms.append(float(l2_penalty(net).detach()))
            opt.zero_grad()
            loss = 1e-2 * l2_penalty(net)
            loss.backward()
            opt.step()
        norms.append(float(l2_penalty(net).detach()))
        assert all(b < a for a, b in zip(norms, norms[1:]))


class TestTraining:
    def test_overfits_separable_data(self):
        records, pipe = separable_dataset(n=8)
        config = TrainingConfig(
            initial_learning_rate=3e-3,
            lr_decay_per_epoch=1.0,
            l2_coefficient=1e-4,  # desk-scale: the full 1e-2 collapses a tiny net
            epochs=100,  # 2 steps per epoch at batch 4 -> 200 steps
            batch_size=4,
            global_seed=0,
        )
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=0)
        trained = train(model, records, config, pipe)
        assert trained.training_log[-1].train_accuracy == 1.0

    def test_loss_descends(self):
        records, pipe = separable_dataset(n=8)
        config = TrainingConfig(
            initial_learning_rate=3e-3,
            lr_decay_per_epoch=1.0,
            l2_coefficient=0.0,
            epochs=6,
            batch_size=4,
            global_seed=0,
        )
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=0)
        trained = train(model, records, config, pipe)
        assert trained.training_log[5].loss < trained.training_log[0].loss

    def test_empty_dataset_rejected(self):
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)))
        with pytest.raises(TrainingError):
            train(model, [], TrainingConfig(epochs=1), FakePipeline({}))

    def test_single_class_warns_but_proceeds(self):
        records, pipe = separable_dataset(n=4)
        records = [r for r in records if r.label == POSITIVE]
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)))
        config = TrainingConfig(initial_learning_rate=1e-3, epochs=1, batch_size=2)
        with pytest.warns(UserWarning, match="single class"):
            train(model, records, config, pipe)

    def test_checkpoint_per_epoch(self, tmp_path):
        records, pipe = separable_dataset(n=4)
        config = TrainingConfig(initial_learning_rate=1e-3, epochs=3, batch_size=4)
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)))
        train(model, records, config, pipe, checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [
            "epoch_000.ckpt",
            "epoch_001.ckpt",
            "epoch_002.ckpt",
        ]


class TestPredictClassify:
    def test_symmetric_logits_score_half(self):
        from cxrkit.model import _softmax_positive

        assert _softmax_positive(np.array([0.0, 0.0])) == pytest.approx(0.5)

    def test_extreme_logits_score_one(self):
        from cxrkit.model import _softmax_positive

        assert _softmax_positive(np.array([-40.0, 40.0])) == pytest.approx(1.0)

    def test_probabilities_sum_to_one(self):
        from cxrkit.model import _softmax_positive

        rng = np.random.default_rng(0)
        for _ in range(100):
            logits = rng.normal(0, 5, 2)
            pos = _softmax_positive(logits)
            neg = _softmax_positive(logits[::-1])
            assert pos + neg == pytest.approx(1.0, abs=1e-12)

    def test_predict_score_in_range_and_deterministic(self):
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=1)
        x = make_input(seed=2)
        a = predict(model, x)
        b = predict(model, x)
        assert 0.0 <= a.score <= 1.0
        assert a == b

    def test_classify_examples(self):
        assert classify(0.9, 0.5) == POSITIVE
        assert classify(0.5, 0.5) == POSITIVE  # boundary inclusive
        assert classify(0.49, 0.5) == NEGATIVE

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(5)
        scores = rng.random(200)
        t1, t2 = 0.3, 0.7
        set1 = {i for i, s in enumerate(scores) if classify(s, t1) == POSITIVE}
        set2 = {i for i, s in enumerate(scores) if classify(s, t2) == POSITIVE}
        assert set2 <= set1


class TestEmbeddings:
    def test_identical_inputs_identical_embeddings(self):
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=2)
        x = make_input(seed=3)
        assert np.array_equal(extract_embedding(model, x), extract_embedding(model, x))

    def test_embedding_length_matches_config(self):
        model = build_model(ModelConfig("tiny_test_cnn", (64, 32, 2)), init_seed=2)
        assert extract_embedding(model, make_input(seed=4)).shape == (32,)

    def test_cross_class_distance_larger_after_training(self):
        records, pipe = separable_dataset(n=8)
        config = TrainingConfig(
            initial_learning_rate=3e-3, lr_decay_per_epoch=1.0, l2_coefficient=0.0,
            epochs=40, batch_size=4, global_seed=0,
        )
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=0)
        train(model, records, config, pipe)
        embs = {r.scan_id: extract_embedding(model, pipe.inputs[r.scan_id]) for r in records}
        same = np.linalg.norm(embs["s0"] - embs["s2"])  # both positive
        cross = np.linalg.norm(embs["s0"] - embs["s1"])  # positive vs negative
        assert cross > same


class TestMajorityVote:
    def test_examples(self):
        assert majority_vote([POSITIVE, POSITIVE, NEGATIVE, NEGATIVE, POSITIVE]) == POSITIVE
        assert majority_vote([NEGATIVE] * 5) == NEGATIVE

    def test_all_five_voter_patterns_match_mode_oracle(self):
        """Exhaustive 2^5 enumeration against a brute-force mode count."""
        for pattern in itertools.product([POSITIVE, NEGATIVE], repeat=5):
            labels = list(pattern)
            want = POSITIVE if labels.count(POSITIVE) > labels.count(NEGATIVE) else NEGATIVE
            assert majority_vote(labels) == want

    def test_even_split_breaks_positive(self):
        assert majority_vote([POSITIVE, NEGATIVE]) == POSITIVE

    def test_odd_count_never_ties(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            labels = [POSITIVE if rng.random() < 0.5 else NEGATIVE for _ in range(7)]
            pos, neg = labels.count(POSITIVE), labels.count(NEGATIVE)
            assert pos != neg

    def test_empty_rejected(self):
        with pytest.raises(ModelError):
            majority_vote([])


class TestCheckpointIO:
    def test_round_trip_preserves_predictions(self, tmp_path):
        records, pipe = separable_dataset(n=4)
        config = TrainingConfig(initial_learning_rate=1e-3, epochs=2, batch_size=4)
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=0)
        train(model, records, config, pipe)
        path = save_checkpoint(model, config, tmp_path / "m.ckpt", epoch=1, metrics={"loss": 0.1})
        loaded, loaded_config = load_checkpoint(path)
        assert loaded_config == config
        assert len(loaded.training_log) == 2
        x = make_input(seed=11)
        assert predict(loaded, x) == predict(model, x)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ModelError, match="no checkpoint"):
            load_checkpoint(tmp_path / "none.ckpt")
