"""Toy data generator, softmax trainer, and the end-to-end adaptation protocol."""

import dataclasses

import numpy as np
import pytest

from synvec.errors import TrainingDivergedError, ValidationError
from synvec.tensor_store import read_checkpoint, write_checkpoint
from synvec.toy_experiment import (
    ZERO_SHIFT,
    ConditionShift,
    ToyDataSpec,
    ToyDataset,
    ToyModel,
    TrainConfig,
    build_domain_task_vectors,
    concat_datasets,
    evaluate_error,
    generate_toy_data,
    loss_gradients,
    run_adaptation_protocol,
    run_ensemble_protocol,
    train,
    training_loss,
)
from synvec.vector_ops import apply_task_vector, compute_task_vector


def small_spec(**kw):
    defaults = dict(samples_per_class=8, num_classes_per_domain=3, feature_dim=6)
    defaults.update(kw)
    return ToyDataSpec(**defaults)


def quick_config(**kw):
    defaults = dict(epochs=5, seed=1)
    defaults.update(kw)
    return TrainConfig(**defaults)


# --- generator ---


def test_zero_shift_makes_conditions_identical():
    spec = small_spec(condition_shift=ZERO_SHIFT)
    real = generate_toy_data(spec, "source_0", "real", "train")
    syn = generate_toy_data(spec, "source_0", "synthetic", "train")
    assert real.features.tobytes() == syn.features.tobytes()
    assert np.array_equal(real.labels, syn.labels)


def test_generation_is_deterministic():
    spec = small_spec()
    a = generate_toy_data(spec, "target", "real", "eval")
    b = generate_toy_data(spec, "target", "real", "eval")
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_zero_noise_identity_condition_gives_exact_means():
    spec = small_spec(
        base_noise_stddev=0.0,
        condition_shift=ConditionShift(1.0, 0.0, 0.0, 0.0),
    )
    data = generate_toy_data(spec, "source_0", "real", "train")
    # every sample within a class is identical: class mean + domain offset
    for label in np.unique(data.labels):
        rows = data.features[data.labels == label]
        assert np.all(rows == rows[0])


def test_splits_and_domains_differ():
    spec = small_spec()
    train_split = generate_toy_data(spec, "target", "real", "train")
    eval_split = generate_toy_data(spec, "target", "real", "eval")
    assert train_split.features.tobytes() != eval_split.features.tobytes()
    other_domain = generate_toy_data(spec, "source_0", "real", "train")
    assert not np.array_equal(other_domain.labels, train_split.labels)


def test_target_labels_use_last_block():
    spec = small_spec(num_source_domains=2)
    data = generate_toy_data(spec, "target", "synthetic", "train")
    assert data.labels.min() == 2 * spec.num_classes_per_domain
    assert data.labels.max() == 3 * spec.num_classes_per_domain - 1


def test_unknown_domain_and_condition_rejected():
    spec = small_spec()
    with pytest.raises(ValidationError):
        generate_toy_data(spec, "source_1", "real", "train")  # only source_0 exists
    with pytest.raises(ValidationError):
        generate_toy_data(spec, "target", "augmented", "train")
    with pytest.raises(ValidationError):
        generate_toy_data(spec, "target", "real", "test")


def test_channel_is_shared_across_seeds_within_variant():
    base = small_spec(base_noise_stddev=0.0)
    a = generate_toy_data(dataclasses.replace(base, seed=1), "source_0", "synthetic", "train")
    b = generate_toy_data(dataclasses.replace(base, seed=2), "source_0", "synthetic", "train")
    # different worlds, but the same affine channel: different feature values
    assert a.features.tobytes() != b.features.tobytes()
    variant = generate_toy_data(
        dataclasses.replace(base, channel_variant=1, seed=1), "source_0", "synthetic", "train"
    )
    same_variant = generate_toy_data(
        dataclasses.replace(base, seed=1), "source_0", "synthetic", "train"
    )
    assert variant.features.tobytes() != same_variant.features.tobytes()


# --- model and training ---


def test_zero_epochs_returns_init_unchanged():
    spec = small_spec()
    data = generate_toy_data(spec, "source_0", "real", "train")
    init = ToyModel.zeros(spec.num_classes_total, spec.feature_dim)
    out = train(init, data, quick_config(epochs=0))
    assert np.array_equal(out.weights, init.weights)
    assert np.array_equal(out.bias, init.bias)


def test_linearly_separable_set_reaches_zero_training_error():
    rng = np.random.default_rng(5)
    n = 60
    features = np.concatenate(
        [rng.normal(-4, 0.3, size=(n, 2)), rng.normal(4, 0.3, size=(n, 2))]
    )
    labels = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    data = ToyDataset(features=features, labels=labels)
    model = train(ToyModel.zeros(2, 2), data, TrainConfig())
    assert evaluate_error(model, data) == 0.0


def test_analytic_gradient_matches_finite_differences(rng):
    # 3 classes, 4 dims, central differences with a 1e-4 step
    features = rng.standard_normal((12, 4))
    labels = rng.integers(0, 3, size=12).astype(np.int64)
    data = ToyDataset(features=features, labels=labels)
    model = ToyModel(rng.standard_normal((3, 4)) * 0.4, rng.standard_normal(3) * 0.2)
    l2 = 1e-3
    _, grad_w, grad_b = loss_gradients(model, data, l2)
    step = 1e-4

    def numeric(get, put):
        flat = get().copy().reshape(-1)
        grads = np.zeros_like(flat)
        for i in range(flat.size):
            for sign in (1.0, -1.0):
                bumped = flat.copy()
                bumped[i] += sign * step
                grads[i] += sign * training_loss(put(bumped.reshape(get().shape)), data, l2)
        return grads / (2 * step)

    numeric_w = numeric(lambda: model.weights,
                        lambda w: ToyModel(w, model.bias)).reshape(model.weights.shape)
    numeric_b = numeric(lambda: model.bias, lambda b: ToyModel(model.weights, b))
    assert np.max(np.abs(grad_w - numeric_w)) <= 1e-5
    assert np.max(np.abs(grad_b - numeric_b)) <= 1e-5


def test_training_reduces_loss():
    spec = small_spec()
    data = generate_toy_data(spec, "source_0", "real", "train")
    init = ToyModel.zeros(spec.num_classes_total, spec.feature_dim)
    config = quick_config()
    trained = train(init, data, config)
    assert training_loss(trained, data, config.l2_penalty) <= \
        training_loss(init, data, config.l2_penalty)


def test_divergence_reports_epoch_and_batch():
    # lr * l2 >> 1 multiplies the weights every step until they overflow
    spec = small_spec(class_mean_scale=50.0, base_noise_stddev=0.0)
    data = generate_toy_data(spec, "source_0", "real", "train")
    with pytest.raises(TrainingDivergedError) as exc:
        train(ToyModel.zeros(spec.num_classes_total, spec.feature_dim), data,
              TrainConfig(learning_rate=1e12, epochs=60))
    assert exc.value.epoch is not None and exc.value.batch is not None


def test_training_is_deterministic():
    spec = small_spec()
    data = generate_toy_data(spec, "source_0", "synthetic", "train")
    init = ToyModel.zeros(spec.num_classes_total, spec.feature_dim)
    a = train(init, data, quick_config())
    b = train(init, data, quick_config())
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


# --- evaluation ---


def test_true_logit_model_has_zero_error(rng):
    # identity weights on one-hot features produce the true one-hot logits
    labels = rng.integers(0, 4, size=40).astype(np.int64)
    onehot_features = np.eye(4)[labels]
    model = ToyModel(np.eye(4), np.zeros(4))
    assert evaluate_error(model, ToyDataset(features=onehot_features, labels=labels)) == 0.0


def test_zero_model_on_balanced_data():
    # labels 0..9 balanced, 2000 samples; argmax ties resolve to class 0
    spec = ToyDataSpec(samples_per_class=200)
    data = generate_toy_data(spec, "source_0", "real", "eval")
    assert len(data) == 2000
    model = ToyModel.zeros(spec.num_classes_total, spec.feature_dim)
    assert evaluate_error(model, data) == pytest.approx(0.9, abs=0.05)


def test_training_improves_over_init():
    spec = small_spec()
    data = generate_toy_data(spec, "source_0", "real", "train")
    init = ToyModel.zeros(spec.num_classes_total, spec.feature_dim)
    trained = train(init, data, quick_config())
    assert evaluate_error(trained, data) <= evaluate_error(init, data)


def test_empty_dataset_rejected():
    model = ToyModel.zeros(3, 2)
    data = ToyDataset(features=np.empty((0, 2)), labels=np.empty(0, dtype=np.int64))
    with pytest.raises(ValidationError):
        evaluate_error(model, data)


def test_tensor_map_round_trip_preserves_model(rng):
    model = ToyModel(rng.standard_normal((4, 3)), rng.standard_normal(4))
    back = ToyModel.from_tensor_map(model.to_tensor_map())
    assert np.array_equal(back.weights, model.weights)
    assert np.array_equal(back.bias, model.bias)


# --- protocols ---


def fast_protocol_args():
    spec = small_spec(samples_per_class=12)
    config = quick_config(epochs=8)
    return spec, config


def test_zero_only_grid_gives_exactly_zero_reduction():
    spec, config = fast_protocol_args()
    report = run_adaptation_protocol(spec, config, lambda_grid=(0.0,), num_seeds=2)
    for outcome in report.outcomes:
        assert outcome.best_lambda == 0.0
        assert outcome.best_error == outcome.baseline_error
        assert outcome.relative_reduction == 0.0


def test_protocol_reports_are_deterministic():
    spec, config = fast_protocol_args()
    a = run_adaptation_protocol(spec, config, num_seeds=2)
    b = run_adaptation_protocol(spec, config, num_seeds=2)
    assert a.to_json() == b.to_json()
    assert a.to_csv() == b.to_csv()


def test_zero_gap_reduction_is_exactly_zero_every_seed():
    spec = small_spec(condition_shift=ZERO_SHIFT, samples_per_class=12)
    report = run_adaptation_protocol(spec, quick_config(epochs=8), num_seeds=4)
    assert all(o.relative_reduction == 0.0 for o in report.outcomes)
    assert report.mean_relative_reduction == 0.0


def test_ensemble_with_one_domain_equals_single_protocol():
    spec, config = fast_protocol_args()
    single = run_adaptation_protocol(spec, config, num_seeds=3)
    ensemble = run_ensemble_protocol(spec, config, num_seeds=3)
    for a, b in zip(single.outcomes, ensemble.outcomes):
        assert a.baseline_error == b.baseline_error
        assert a.lambda_errors == b.lambda_errors
        assert a.best_lambda == b.best_lambda


def test_ensemble_num_vectors_validated():
    spec, config = fast_protocol_args()
    with pytest.raises(ValidationError):
        run_ensemble_protocol(spec, config, num_seeds=1, num_vectors=2)


def test_serialized_models_reproduce_protocol_point(tmp_path):
    # Interface identity: pushing the models through the container changes nothing.
    spec, config = fast_protocol_args()
    from synvec.toy_experiment import _pretrain, _source_data

    parent = _pretrain(spec, config)
    target = train(parent, generate_toy_data(spec, "target", "synthetic", "train"), config)
    real_s = train(parent, _source_data(spec, "source_0", "real"), config)
    syn_s = train(parent, _source_data(spec, "source_0", "synthetic"), config)
    tau = compute_task_vector(real_s.to_tensor_map(), syn_s.to_tensor_map())
    eval_data = generate_toy_data(spec, "target", "real", "eval")

    direct = ToyModel.from_tensor_map(
        apply_task_vector(target.to_tensor_map(), tau, 0.5)
    )
    target_path = tmp_path / "target.st"
    write_checkpoint(target.to_tensor_map(), target_path)
    reloaded = ToyModel.from_tensor_map(
        apply_task_vector(read_checkpoint(target_path), tau, 0.5)
    )
    assert evaluate_error(direct, eval_data) == evaluate_error(reloaded, eval_data)
    assert np.array_equal(direct.weights, reloaded.weights)


def test_domain_vectors_carry_provenance():
    spec = small_spec(num_source_domains=2, samples_per_class=10)
    vectors = build_domain_task_vectors(spec, quick_config(epochs=4))
    assert [v.provenance.source_domain_label for v in vectors] == ["source_0", "source_1"]
    assert all(v.provenance.syn_condition_label == "synthetic_v0" for v in vectors)


def test_report_json_shape():
    spec, config = fast_protocol_args()
    report = run_adaptation_protocol(spec, config, lambda_grid=(0.0, 0.5), num_seeds=2)
    obj = report.to_json_obj()
    assert obj["protocol"] == "single"
    assert obj["lambda_grid"] == [0.0, 0.5]
    assert obj["num_seeds"] == 2
    assert set(obj["summary"]) == {
        "mean_baseline_error",
        "mean_best_error",
        "mean_relative_reduction",
        "stderr_relative_reduction",
    }
    assert all(0.0 <= o["baseline_error"] <= 1.0 for o in obj["seeds"])


def test_concat_datasets_validates():
    with pytest.raises(ValidationError):
        concat_datasets([])
