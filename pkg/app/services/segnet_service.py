"""
Stacked multi-scale segmentation network: forward pass, layer-wise training, weight files
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from app.core.errors import TrainingDataError, TruncatedPayloadError, WeightFormatError
from app.core.logging import get_logger
from app.models.images import FeatureImage, LabelImage, ProbabilityImage
from app.models.network import AutoencoderStack, LayerParams, layer_input_channels
from app.models.scene import VOID_ID
from app.schemas.config import TrainConfig
from app.schemas.metrics import LayerReport
from app.services.feature_service import pool_masked

logger = get_logger(__name__)

WEIGHTS_MAGIC = b"SFSEGNET"
WEIGHTS_VERSION = 1
# magic, version, classes, hidden, kernel, layers, first scale, trained layers, input channels
_HEADER = struct.Struct("<8sI7I")
# scale, input channels
_LAYER_HEADER = struct.Struct("<2I")

IM2COL_ELEMENTS = 4_000_000
LOSS_CHUNK = 65536

Dataset = Sequence[Tuple[FeatureImage, LabelImage]]


# Forward pass

def _conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' convolution as im2col @ W; returns (H*W, d)"""
    d, c, k, _ = weight.shape
    _, height, width = x.shape
    r = k // 2
    padded = np.pad(x, ((0, 0), (r, r), (r, r)))
    matrix = weight.reshape(d, -1)
    out = np.empty((height * width, d), dtype=np.result_type(x, weight))
    rows = max(1, IM2COL_ELEMENTS // max(1, width * c * k * k))
    for r0 in range(0, height, rows):
        r1 = min(height, r0 + rows)
        windows = sliding_window_view(padded[:, r0:r1 + 2 * r], (k, k), axis=(1, 2))
        cols = windows.transpose(1, 2, 0, 3, 4).reshape(-1, c * k * k)
        out[r0 * width:r1 * width] = cols @ matrix.T + bias
    return out


def _im2col_at(x: np.ndarray, kernel: int, flat_index: np.ndarray) -> np.ndarray:
    """k x k input windows around selected pixels, (n, C*k*k)"""
    c, _, width = x.shape
    r = kernel // 2
    padded = np.pad(x, ((0, 0), (r, r), (r, r)))
    windows = sliding_window_view(padded, (kernel, kernel), axis=(1, 2))
    rows, cols = np.divmod(flat_index, width)
    return windows[:, rows, cols].transpose(1, 0, 2, 3).reshape(len(flat_index), -1)


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(pre)
    if activation == "linear":
        return pre
    raise ValueError(f"unknown activation '{activation}'")


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def layer_forward(params: LayerParams, x: np.ndarray, activation: str = "tanh") -> Tuple[np.ndarray, np.ndarray]:
    """Hidden maps (d, H, W) and class logits (K, H, W) of one layer"""
    params.check_input(x.shape[0])
    _, height, width = x.shape
    hidden = _activate(_conv(x, params.encoder_weight, params.encoder_bias), activation)
    logits = hidden @ params.head_weight.T + params.head_bias
    return (hidden.T.reshape(params.hidden, height, width),
            logits.T.reshape(params.num_classes, height, width))


@dataclass(eq=False)
class LayerTrace:
    """Low-resolution state of one evaluated layer"""

    inputs: np.ndarray
    mask: np.ndarray
    hidden: np.ndarray
    probs: np.ndarray
    scale: int


def _layer_input(features: FeatureImage, scale: int,
                 previous: Optional[LayerTrace]) -> Tuple[np.ndarray, np.ndarray]:
    dhac, mask = pool_masked(features.channels, features.mask, 2 ** scale)
    if previous is None:
        return dhac, mask
    factor = 2 ** (scale - previous.scale)
    hidden, _ = pool_masked(previous.hidden, previous.mask, factor)
    probs, _ = pool_masked(previous.probs, previous.mask, factor)
    return np.concatenate([dhac, hidden.astype(dhac.dtype), probs.astype(dhac.dtype)]), mask


def _forward_trace(stack: AutoencoderStack, features: FeatureImage,
                   count: Optional[int] = None) -> List[LayerTrace]:
    count = stack.trained_layers if count is None else count
    traces: List[LayerTrace] = []
    for params in stack.layers[:count]:
        x, mask = _layer_input(features, params.scale, traces[-1] if traces else None)
        hidden, logits = layer_forward(params, x)
        probs = softmax(logits)
        probs[:, ~mask] = 1.0 / params.num_classes
        traces.append(LayerTrace(x, mask, hidden, probs, params.scale))
    return traces


def upsample_probs(probs: np.ndarray, shape: Tuple[int, int], factor: int) -> np.ndarray:
    """Bilinear, pixel-center aligned upsampling of class maps, renormalized"""
    height, width = shape
    ys = (np.arange(height) + 0.5) / factor - 0.5
    xs = (np.arange(width) + 0.5) / factor - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([gy.ravel(), gx.ravel()])
    out = np.stack([
        ndimage.map_coordinates(plane.astype(np.float64), coords, order=1, mode="nearest").reshape(height, width)
        for plane in probs
    ])
    return out / out.sum(axis=0, keepdims=True)


def _full_resolution(trace: LayerTrace, features: FeatureImage) -> ProbabilityImage:
    num_classes = trace.probs.shape[0]
    full = upsample_probs(trace.probs, features.shape, 2 ** trace.scale)
    full[:, ~features.mask] = 1.0 / num_classes
    return ProbabilityImage(full, features.mask)


def stack_forward(stack: AutoencoderStack, features: FeatureImage) -> List[ProbabilityImage]:
    """Full-resolution class distributions after every layer"""
    return [_full_resolution(trace, features) for trace in _forward_trace(stack, features)]


def predict_labels(stack: AutoencoderStack, features: FeatureImage) -> LabelImage:
    """Argmax of the last layer; masked pixels void"""
    return stack_forward(stack, features)[-1].argmax()


# Training

def downsample_labels(labels: LabelImage, factor: int, shape: Tuple[int, int]) -> LabelImage:
    """Nearest neighbour at block centers"""
    height, width = labels.shape
    rows = np.minimum(np.arange(shape[0]) * factor + factor // 2, height - 1)
    cols = np.minimum(np.arange(shape[1]) * factor + factor // 2, width - 1)
    return labels[np.ix_(rows, cols)]


def _loss_and_gradients(params: LayerParams, cols: np.ndarray, targets: np.ndarray,
                        activation: str = "tanh", with_gradients: bool = True):
    """Mean cross-entropy over pixels and its gradients in tensors() order"""
    encoder = params.encoder_weight.reshape(params.hidden, -1)
    pre = cols @ encoder.T + params.encoder_bias
    hidden = _activate(pre, activation)
    logits = hidden @ params.head_weight.T + params.head_bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    n = len(targets)
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, targets]))
    if not with_gradients:
        return loss, None

    d_logits = np.exp(shifted - log_norm[:, None])
    d_logits[rows, targets] -= 1.0
    d_logits /= n
    grad_head_w = d_logits.T @ hidden
    grad_head_b = d_logits.sum(axis=0)
    d_hidden = d_logits @ params.head_weight
    d_pre = d_hidden * (1.0 - hidden * hidden) if activation == "tanh" else d_hidden
    grad_enc_w = (d_pre.T @ cols).reshape(params.encoder_weight.shape)
    grad_enc_b = d_pre.sum(axis=0)
    grads = [grad_enc_w, grad_enc_b, grad_head_w, grad_head_b]
    return loss, [g.astype(t.dtype, copy=False) for g, t in zip(grads, params.tensors())]


def _dataset_loss(params: LayerParams, cols: np.ndarray, targets: np.ndarray) -> float:
    total = 0.0
    for start in range(0, len(targets), LOSS_CHUNK):
        chunk_loss, _ = _loss_and_gradients(params, cols[start:start + LOSS_CHUNK],
                                            targets[start:start + LOSS_CHUNK], with_gradients=False)
        total += chunk_loss * len(targets[start:start + LOSS_CHUNK])
    return total / len(targets)


def _dataset_accuracy(params: LayerParams, cols: np.ndarray, targets: np.ndarray,
                      activation: str = "tanh") -> float:
    correct = 0
    encoder = params.encoder_weight.reshape(params.hidden, -1)
    for start in range(0, len(targets), LOSS_CHUNK):
        hidden = _activate(cols[start:start + LOSS_CHUNK] @ encoder.T + params.encoder_bias, activation)
        logits = hidden @ params.head_weight.T + params.head_bias
        correct += int((np.argmax(logits, axis=1) == targets[start:start + LOSS_CHUNK]).sum())
    return correct / len(targets)


def _training_pixels(stack: AutoencoderStack, index: int, dataset: Dataset, rng: np.random.Generator,
                     pixels_per_image: int) -> Tuple[np.ndarray, np.ndarray]:
    scale = stack.scale_of(index)
    frozen = stack.truncated(index)
    all_cols, all_targets = [], []
    for features, labels in dataset:
        traces = _forward_trace(frozen, features)
        x, mask = _layer_input(features, scale, traces[-1] if traces else None)
        targets = downsample_labels(labels, 2 ** scale, mask.shape)
        usable = mask & (targets != VOID_ID) & (targets < stack.num_classes)
        flat = np.flatnonzero(usable)
        if len(flat) > pixels_per_image:
            flat = np.sort(rng.choice(flat, pixels_per_image, replace=False))
        if len(flat):
            all_cols.append(_im2col_at(x, stack.kernel, flat).astype(np.float32))
            all_targets.append(targets.ravel()[flat].astype(np.int64))
    if not all_targets:
        raise TrainingDataError(f"no labelled pixels for layer {index + 1}")
    return np.concatenate(all_cols), np.concatenate(all_targets)


def train_layer(stack: AutoencoderStack, index: int, dataset: Dataset,
                config: TrainConfig) -> Tuple[LayerParams, LayerReport]:
    """Train layer `index` (0-based) against the frozen layers before it.

    Mini-batch SGD with momentum on mean pixel cross-entropy. The parameters
    with the lowest full training-set loss seen (initialization included) are
    returned, so the final loss never exceeds the initial one.
    """
    if not dataset:
        raise TrainingDataError("empty training dataset")
    if stack.trained_layers < index:
        raise ValueError(f"layers before {index + 1} must be trained first")
    rng = np.random.default_rng(config.seed + index)
    params = LayerParams.initialize(
        layer_input_channels(index, stack.hidden, stack.num_classes),
        stack.hidden, stack.kernel, stack.num_classes, stack.scale_of(index), rng,
    )
    cols, targets = _training_pixels(stack, index, dataset, rng, config.pixels_per_image)
    n = len(targets)

    initial_loss = _dataset_loss(params, cols, targets)
    best, best_loss = params.copy(), initial_loss
    velocity = [np.zeros_like(t) for t in params.tensors()]
    lr = np.float32(config.learning_rate)
    momentum = np.float32(config.momentum)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            _, grads = _loss_and_gradients(params, cols[batch], targets[batch])
            for tensor, v, g in zip(params.tensors(), velocity, grads):
                v *= momentum
                v -= lr * g
                tensor += v
        loss = _dataset_loss(params, cols, targets)
        logger.debug("segnet.epoch", layer=index + 1, epoch=epoch, loss=round(loss, 6))
        if loss < best_loss:
            best, best_loss = params.copy(), loss

    report = LayerReport(
        layer=index + 1,
        scale=best.scale,
        initial_loss=initial_loss,
        final_loss=best_loss,
        train_accuracy=_dataset_accuracy(best, cols, targets),
        epochs=config.epochs,
    )
    logger.info("segnet.layer_trained", layer=index + 1, pixels=n, initial_loss=round(initial_loss, 6),
                final_loss=round(best_loss, 6))
    return best, report


def train_stack(dataset: Dataset, config: TrainConfig, stack: Optional[AutoencoderStack] = None,
                start_layer: int = 0) -> Tuple[AutoencoderStack, List[LayerReport]]:
    """Train layers start_layer..L-1 in order; earlier layers are taken from `stack`"""
    if stack is None:
        if start_layer:
            raise ValueError("resuming needs an existing stack")
        stack = AutoencoderStack(num_classes=config.num_classes, hidden=config.hidden,
                                 kernel=config.kernel, num_layers=config.layers)
    elif stack.trained_layers < start_layer:
        raise ValueError(f"stack has {stack.trained_layers} layers, cannot resume at layer {start_layer + 1}")
    stack = stack.truncated(start_layer)
    stack.num_layers = config.layers
    reports = []
    for index in range(start_layer, config.layers):
        params, report = train_layer(stack, index, dataset, config)
        stack.layers.append(params)
        reports.append(report)
    return stack, reports


def layer_accuracy(stack: AutoencoderStack, dataset: Dataset) -> List[float]:
    """Full-resolution pixel accuracy of every layer's output over labelled, unmasked pixels"""
    correct = np.zeros(stack.trained_layers, dtype=np.int64)
    total = 0
    for features, labels in dataset:
        usable = features.mask & (labels != VOID_ID)
        total += int(usable.sum())
        for i, probs in enumerate(stack_forward(stack, features)):
            correct[i] += int((probs.argmax()[usable] == labels[usable]).sum())
    if total == 0:
        raise TrainingDataError("no labelled pixels to score")
    return [float(c) / total for c in correct]


def gradient_check(params: LayerParams, x: np.ndarray, labels: LabelImage, activation: str = "tanh",
                   step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients (float64)"""
    params = params.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    params.check_input(x.shape[0])
    usable = (labels != VOID_ID).ravel()
    if not usable.any():
        raise TrainingDataError("gradient check needs labelled pixels")
    cols = _im2col_at(x, params.kernel, np.flatnonzero(usable))
    targets = labels.ravel()[usable].astype(np.int64)
    _, analytic = _loss_and_gradients(params, cols, targets, activation)

    worst = 0.0
    for tensor, grad in zip(params.tensors(), analytic):
        for idx in np.ndindex(tensor.shape):
            original = tensor[idx]
            tensor[idx] = original + step
            plus, _ = _loss_and_gradients(params, cols, targets, activation, with_gradients=False)
            tensor[idx] = original - step
            minus, _ = _loss_and_gradients(params, cols, targets, activation, with_gradients=False)
            tensor[idx] = original
            numeric = (plus - minus) / (2 * step)
            error = abs(grad[idx] - numeric) / max(1e-8, abs(grad[idx]))
            worst = max(worst, error)
    return worst


# Weight files

def encode_weights(stack: AutoencoderStack) -> bytes:
    parts = [_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, stack.num_classes, stack.hidden, stack.kernel,
                          stack.num_layers, stack.first_scale, stack.trained_layers, stack.input_channels)]
    for params in stack.layers:
        parts.append(_LAYER_HEADER.pack(params.scale, params.in_channels))
        parts.append(params.to_bytes())
    return b"".join(parts)


def decode_weights(data: bytes) -> AutoencoderStack:
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("weight file shorter than its header")
    magic, version, num_classes, hidden, kernel, num_layers, first_scale, trained, input_channels = \
        _HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC:
        raise WeightFormatError("not a segmentation weight file (bad magic)")
    if version != WEIGHTS_VERSION:
        raise WeightFormatError(f"weight file version {version}, expected {WEIGHTS_VERSION}")
    offset = _HEADER.size
    layers = []
    for _ in range(trained):
        if len(data) < offset + _LAYER_HEADER.size:
            raise TruncatedPayloadError("weight file ends inside a layer header")
        scale, in_channels = _LAYER_HEADER.unpack_from(data, offset)
        offset += _LAYER_HEADER.size
        shapes = [(hidden, in_channels, kernel, kernel), (hidden,), (num_classes, hidden), (num_classes,)]
        tensors = []
        for shape in shapes:
            count = int(np.prod(shape))
            if len(data) < offset + 4 * count:
                raise TruncatedPayloadError("weight file payload truncated")
            tensors.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset)
                           .astype(np.float32).reshape(shape))
            offset += 4 * count
        layers.append(LayerParams(*tensors, scale=scale))
    if offset != len(data):
        raise WeightFormatError(f"{len(data) - offset} trailing bytes after the last layer")
    try:
        return AutoencoderStack(num_classes=num_classes, hidden=hidden, kernel=kernel, num_layers=num_layers,
                                first_scale=first_scale, layers=layers, input_channels=input_channels)
    except ValueError as e:
        raise WeightFormatError(str(e)) from e


def save_weights(path: Union[str, Path], stack: AutoencoderStack) -> None:
    Path(path).write_bytes(encode_weights(stack))


def load_weights(path: Union[str, Path]) -> AutoencoderStack:
    return decode_weights(Path(path).read_bytes())


class SegmentationService:
    """Per-frame inference with a trained stack"""

    def __init__(self, stack: AutoencoderStack):
        if stack.trained_layers == 0:
            raise TrainingDataError("stack has no trained layers")
        self.stack = stack

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SegmentationService":
        return cls(load_weights(path))

    @property
    def num_classes(self) -> int:
        return self.stack.num_classes

    def predict(self, features: FeatureImage) -> ProbabilityImage:
        return stack_forward(self.stack, features)[-1]
