import numpy as np
import pytest

from app.core.errors import (
    ChannelMismatchError, TrainingDataError, TruncatedPayloadError, WeightFormatError,
)
from app.models.images import FeatureImage
from app.models.network import AutoencoderStack, LayerParams, layer_input_channels
from app.models.scene import VOID_ID
from app.schemas.config import TrainConfig, build_run_config
from app.services.pipeline_service import PipelineService
from app.services.segnet_service import (
    SegmentationService, _dataset_accuracy, _im2col_at, decode_weights, encode_weights, gradient_check,
    layer_accuracy, layer_forward, load_weights, predict_labels, save_weights, softmax, stack_forward, train_stack,
    upsample_probs,
)

TOY_CONFIG = TrainConfig(layers=2, hidden=4, kernel=3, epochs=20, batch_size=64, learning_rate=0.05,
                         pixels_per_image=200, seed=5)


def _toy_dataset(count=4, size=32, block=8, seed=0):
    """Blockwise constant images whose class is readable from the first channel"""
    rng = np.random.default_rng(seed)
    blocks = size // block
    dataset = []
    for _ in range(count):
        classes = rng.integers(0, 3, size=(blocks, blocks))
        labels = np.kron(classes, np.ones((block, block), dtype=np.int64)).astype(np.uint8)
        channels = np.stack([
            labels / 4.0,
            np.kron(rng.uniform(size=(blocks, blocks)), np.ones((block, block))),
            np.full(labels.shape, 0.5),
            np.zeros(labels.shape),
        ])
        mask = np.ones(labels.shape, dtype=bool)
        mask[0, :3] = False
        labels[mask == 0] = VOID_ID
        dataset.append((FeatureImage(channels, mask), labels))
    return dataset


@pytest.fixture(scope="module")
def toy_dataset():
    return _toy_dataset()


@pytest.fixture(scope="module")
def trained(toy_dataset):
    return train_stack(toy_dataset, TOY_CONFIG)


@pytest.mark.parametrize("activation", ["tanh", "linear"])
def test_analytic_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(11)
    params = LayerParams.initialize(3, 3, 3, 3, scale=1, rng=rng)
    params.encoder_bias[:] = rng.uniform(-0.5, 0.5, 3)
    params.head_bias[:] = rng.uniform(-0.5, 0.5, 3)
    x = rng.uniform(-1.0, 1.0, size=(3, 8, 8))
    labels = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
    labels[0, 0] = VOID_ID
    assert gradient_check(params, x, labels, activation=activation, step=1e-5) < 1e-4


def test_layer_forward_shapes_and_channel_check():
    rng = np.random.default_rng(0)
    params = LayerParams.initialize(4, 6, 3, 5, scale=1, rng=rng)
    hidden, logits = layer_forward(params, rng.uniform(size=(4, 7, 9)).astype(np.float32))
    assert hidden.shape == (6, 7, 9) and logits.shape == (5, 7, 9)
    assert np.abs(hidden).max() <= 1.0
    with pytest.raises(ChannelMismatchError):
        layer_forward(params, np.zeros((3, 7, 9), dtype=np.float32))


def test_upsampled_probabilities_stay_normalized():
    rng = np.random.default_rng(2)
    probs = rng.uniform(0.1, 1.0, size=(3, 4, 4))
    probs /= probs.sum(axis=0)
    up = upsample_probs(probs, (8, 8), 2)
    assert up.shape == (3, 8, 8)
    np.testing.assert_allclose(up.sum(axis=0), 1.0)
    flat = upsample_probs(np.full((2, 3, 3), 0.5), (12, 12), 4)
    np.testing.assert_allclose(flat, 0.5)


def test_training_reduces_loss(trained):
    stack, reports = trained
    assert stack.trained_layers == 2
    assert [report.layer for report in reports] == [1, 2]
    assert [report.scale for report in reports] == [1, 2]
    for report in reports:
        assert report.final_loss <= report.initial_loss
    assert reports[0].final_loss < reports[0].initial_loss
    assert reports[0].train_accuracy > 0.5


def test_stack_forward_outputs_distributions(trained, toy_dataset):
    stack, _ = trained
    features, labels = toy_dataset[0]
    outputs = stack_forward(stack, features)
    assert len(outputs) == 2
    for probs in outputs:
        assert probs.probs.shape == (5, 32, 32)
        np.testing.assert_allclose(probs.probs.sum(axis=0), 1.0, atol=1e-5)
    predicted = predict_labels(stack, features)
    assert np.all(predicted[~features.mask] == VOID_ID)
    accuracies = layer_accuracy(stack, toy_dataset)
    assert len(accuracies) == 2 and all(0.0 <= a <= 1.0 for a in accuracies)


def test_resumed_training_matches_full_run(tmp_path, trained, toy_dataset):
    full, _ = trained
    first, _ = train_stack(toy_dataset, TOY_CONFIG.model_copy(update={"layers": 1}))
    save_weights(tmp_path / "weights.bin", first)
    resumed, reports = train_stack(toy_dataset, TOY_CONFIG, stack=load_weights(tmp_path / "weights.bin"),
                                   start_layer=1)
    assert [report.layer for report in reports] == [2]
    assert encode_weights(resumed) == encode_weights(full)


def test_weight_file_checks(trained):
    stack, _ = trained
    data = encode_weights(stack)
    decoded = decode_weights(data)
    assert decoded.trained_layers == 2 and decoded.num_layers == 2
    np.testing.assert_array_equal(decoded.layers[1].head_weight, stack.layers[1].head_weight)
    with pytest.raises(WeightFormatError):
        decode_weights(b"NOTMODEL" + data[8:])
    with pytest.raises(TruncatedPayloadError):
        decode_weights(data[:-4])
    with pytest.raises(WeightFormatError):
        decode_weights(data + b"\x00\x00\x00\x00")


def test_training_needs_labelled_pixels(toy_dataset):
    with pytest.raises(TrainingDataError):
        train_stack([], TOY_CONFIG)
    features, labels = toy_dataset[0]
    with pytest.raises(TrainingDataError):
        train_stack([(features, np.full_like(labels, VOID_ID))], TOY_CONFIG)


def test_service_rejects_untrained_stack():
    with pytest.raises(TrainingDataError):
        SegmentationService(AutoencoderStack(num_classes=5, hidden=4, kernel=3))


def test_softmax_ignores_a_shared_shift():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 6, 7))
    reference = softmax(logits)
    for shift in (-30.0, 7.5, 1e4):
        np.testing.assert_allclose(softmax(logits + shift), reference, atol=1e-12)
    np.testing.assert_allclose(reference.sum(axis=0), 1.0)


def test_gradients_with_hidden_and_probability_inputs():
    rng = np.random.default_rng(12)
    hidden, num_classes = 4, 5
    channels = layer_input_channels(1, hidden, num_classes)
    assert channels == 4 + hidden + num_classes
    params = LayerParams.initialize(channels, hidden, 3, num_classes, scale=2, rng=rng)
    params.encoder_bias[:] = rng.uniform(-0.5, 0.5, hidden)
    x = rng.uniform(0.0, 1.0, size=(channels, 6, 6))
    labels = rng.integers(0, num_classes, size=(6, 6)).astype(np.uint8)
    assert gradient_check(params, x, labels, step=1e-5) < 1e-4


@pytest.mark.parametrize("activation", ["tanh", "linear"])
def test_dataset_accuracy_uses_the_layer_activation(activation):
    rng = np.random.default_rng(8)
    params = LayerParams.initialize(4, 6, 3, 5, scale=1, rng=rng).astype(np.float64)
    params.encoder_weight *= 6.0
    x = rng.uniform(-1.0, 1.0, size=(4, 10, 10))
    targets = rng.integers(0, 5, size=100)
    _, logits = layer_forward(params, x, activation)
    expected = float(np.mean(logits.reshape(5, -1).argmax(axis=0) == targets))
    cols = _im2col_at(x, 3, np.arange(100))
    assert _dataset_accuracy(params, cols, targets, activation) == pytest.approx(expected)


def test_separable_toy_problem_is_learned():
    config = TrainConfig(layers=1, hidden=8, kernel=3, epochs=60, batch_size=64, learning_rate=0.1,
                         pixels_per_image=256, seed=3)
    dataset = _toy_dataset(count=6, seed=4)
    stack, reports = train_stack(dataset, config)
    assert reports[0].train_accuracy >= 0.99
    assert layer_accuracy(stack, dataset)[0] >= 0.99


def test_resuming_leaves_frozen_layers_untouched(toy_dataset):
    first, _ = train_stack(toy_dataset, TOY_CONFIG.model_copy(update={"layers": 1}))
    frozen = first.layers[0].to_bytes()
    resumed, _ = train_stack(toy_dataset, TOY_CONFIG, stack=first, start_layer=1)
    assert resumed.layers[0].to_bytes() == frozen
    assert first.layers[0].to_bytes() == frozen
    assert first.trained_layers == 1


@pytest.mark.slow
def test_deeper_layers_improve_on_rendered_rooms(tmp_path):
    config = build_run_config({
        "width": 160, "height": 120, "fx": 131.25, "fy": 131.25, "cx": 79.5, "cy": 59.5,
        "n_frames": 12, "n_chairs": 3, "n_tables": 1, "grid_dim": 64, "curvature_window": 7,
        "layers": 4, "hidden": 16, "kernel": 5, "epochs": 10, "pixels_per_image": 4000,
    })
    rooms = []
    for seed in (21, 22):
        room = tmp_path / f"room_{seed}"
        PipelineService(config.with_overrides(seed=seed)).generate(room)
        rooms.append(room)
    report = PipelineService(config).train(rooms, tmp_path / "model")
    accuracy = report.layer_accuracy
    for shallow, deep in zip(accuracy, accuracy[1:]):
        assert deep >= shallow - 0.005
    assert accuracy[-1] >= accuracy[0] + 0.02
