"""Training protocol: loss, Adam, poly schedule, augmentation, toy data, metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .network import VariantSpec, build_network
from .tensor import GradTape, ShapeError, Tensor

IGNORE_INDEX = 255

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


@dataclass(frozen=True)
class LRSchedule:
    """Poly learning-rate policy: base * (1 - iter/max_iter)^power."""

    base_lr: float
    max_iter: int
    power: float = 0.9

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def poly_lr(sched, iteration):
    if not 0 <= iteration <= sched.max_iter:
        raise ValueError(
            f"iteration {iteration} outside [0, {sched.max_iter}]")
    return sched.base_lr * (1.0 - iteration / sched.max_iter) ** sched.power


def cross_entropy_loss(logits, labels, ignore_index=IGNORE_INDEX, tape=None):
    """Mean per-pixel cross entropy over non-ignored pixels.

    ``logits`` is n x C x h x w; ``labels`` n x h x w integer class indices.
    Gradient is (softmax - onehot) / count on non-ignored pixels, zero
    elsewhere. Log-sum-exp runs in 64-bit.
    """
    if logits.ndim != 4:
        raise ShapeError(f"logits must be rank 4, got shape {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(
            f"labels shaped {labels.shape} do not match logits {logits.shape}")
    num_classes = logits.shape[1]
    bad = (labels >= num_classes) & (labels != ignore_index)
    if bad.any():
        raise ValueError(
            f"label value {labels[bad].max()} >= num_classes ({num_classes}) "
            f"and != ignore_index ({ignore_index})")

    valid = labels != ignore_index
    count = int(valid.sum())
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe_labels = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe_labels[:, None], axis=1)[:, 0]
    if count:
        loss_value = -(picked * valid).sum() / count
    else:
        loss_value = 0.0
    loss = Tensor(np.asarray(loss_value), dtype=np.float64)

    if tape is not None:
        def backward_fn(gy):
            if not count:
                return [np.zeros_like(logits.data)]
            grad = np.exp(logp)
            np.put_along_axis(
                grad, safe_labels[:, None],
                np.take_along_axis(grad, safe_labels[:, None], axis=1) - 1.0,
                axis=1)
            grad *= (valid / count)[:, None]
            return [(grad * gy).astype(logits.dtype, copy=False)]

        tape.record(loss, [logits], backward_fn)
    return loss


class OptimizerState:
    """Adam accumulators keyed by parameter name.

    Weight decay is coupled by default (L2 term folded into the gradient
    before the moment updates); set ``decoupled=True`` for AdamW-style
    decay applied directly to the parameters.
    """

    def __init__(self, base_lr=5e-4, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 weight_decay=4.5e-4, decoupled=False):
        self.base_lr = base_lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.first_moment = {}
        self.second_moment = {}
        self.step_count = 0


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update over named parameters.

    ``params`` is a sequence of (name, Tensor); ``grads`` a parallel
    sequence of gradient arrays. Parameters update in place.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads must align")
    for (name, _), grad in zip(params, grads):
        if grad is None or not np.all(np.isfinite(grad)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for (name, p), grad in zip(params, grads):
        if grad.shape != p.shape:
            raise ShapeError(f"gradient shaped {grad.shape} for parameter "
                             f"{name!r} shaped {p.shape}")
        g = grad.astype(p.dtype, copy=False)
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        m = state.first_moment.setdefault(name, np.zeros_like(p.data))
        v = state.second_moment.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        if state.weight_decay and state.decoupled:
            update = update + state.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class AugmentConfig:
    """Flip/mean/scale/crop pipeline settings."""

    crop_size: tuple
    flip_prob: float = 0.5
    mean: tuple = (0.0, 0.0, 0.0)
    scales: tuple = DEFAULT_SCALES

    def __post_init__(self):
        if len(self.crop_size) != 2 or any(s % 8 for s in self.crop_size):
            raise ValueError(f"crop_size must be two multiples of 8, got {self.crop_size}")
        if not self.scales:
            raise ValueError("scales must be nonempty")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be a probability")


@dataclass
class ToySample:
    """Synthetic scene of colored shapes with a per-pixel class map."""

    image: np.ndarray  # 3 x h x w float32
    label: np.ndarray  # h x w int32, values < num_classes or ignore_index
    ignore_index: int = IGNORE_INDEX


def bilinear_resize(image, out_h, out_w):
    """Align-corners-false bilinear resize of a c x h x w array."""
    c, h, w = image.shape

    def axis(in_size, out_size):
        src = (np.arange(out_size, dtype=np.float64) + 0.5) * in_size / out_size - 0.5
        lo = np.floor(src).astype(np.int64)
        frac = src - lo
        hi = np.clip(lo + 1, 0, in_size - 1)
        lo = np.clip(lo, 0, in_size - 1)
        return lo, hi, frac

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    rows = image[:, y0, :] * (1 - fy)[None, :, None] + image[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx
    return out.astype(image.dtype, copy=False)


def nearest_resize(label, out_h, out_w):
    """Nearest-neighbor resize of an h x w index map."""
    h, w = label.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return label[ys[:, None], xs[None, :]]


def augment(sample, cfg, rng):
    """Flip, mean-subtract, random-scale, and random-crop one sample.

    Label geometry transforms in lockstep with the image: nearest neighbor
    for scaling, ignore_index padding when the crop outruns the scaled
    image (the image side pads with zeros).
    """
    image = sample.image.astype(np.float32)
    label = sample.label
    if rng.random() < cfg.flip_prob:
        image = image[:, :, ::-1]
        label = label[:, ::-1]
    image = image - np.asarray(cfg.mean, np.float32)[:, None, None]

    scale = cfg.scales[rng.integers(len(cfg.scales))]
    if scale != 1.0:
        h, w = label.shape
        oh, ow = max(1, round(h * scale)), max(1, round(w * scale))
        image = bilinear_resize(image, oh, ow)
        label = nearest_resize(label, oh, ow)

    ch, cw = cfg.crop_size
    h, w = label.shape
    pad_h, pad_w = max(0, ch - h), max(0, cw - w)
    if pad_h or pad_w:
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))
        label = np.pad(label, ((0, pad_h), (0, pad_w)),
                       constant_values=sample.ignore_index)
        h, w = label.shape
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return ToySample(np.ascontiguousarray(image[:, y0:y0 + ch, x0:x0 + cw]),
                     np.ascontiguousarray(label[y0:y0 + ch, x0:x0 + cw]),
                     sample.ignore_index)


def _paint_disk(label, cls, cy, cx, radius):
    h, w = label.shape
    ys, xs = np.ogrid[:h, :w]
    mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2
    label[mask] = cls
    return mask


def _paint_box(label, cls, cy, cx, half_h, half_w):
    h, w = label.shape
    y0, y1 = max(0, cy - half_h), min(h, cy + half_h)
    x0, x1 = max(0, cx - half_w), min(w, cx + half_w)
    mask = np.zeros((h, w), bool)
    mask[y0:y1, x0:x1] = True
    label[mask] = cls
    return mask


def _toy_palette(num_classes):
    # Saturated, well separated base colors; background stays muted green.
    from .pixmap import color_palette
    pal = color_palette(num_classes).astype(np.float32) / 255.0
    pal[0] = (0.25, 0.42, 0.27)
    return pal


def gen_toy_dataset(num_classes, count, size, seed, ignore_index=IGNORE_INDEX):
    """Deterministic desk-scale dataset of colored shapes.

    Class 0 is a textured background; classes 1..num_classes-1 alternate
    disks and boxes in distinct colors. Every class appears in at least one
    sample whenever count >= num_classes - 1.
    """
    if size % 8:
        raise ValueError(f"size must be divisible by 8, got {size}")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    rng = np.random.default_rng(seed)
    palette = _toy_palette(num_classes)
    samples = []
    for index in range(count):
        label = np.zeros((size, size), np.int32)
        image = np.empty((3, size, size), np.float32)
        image[:] = palette[0][:, None, None]
        image += rng.normal(0.0, 0.04, (3, size, size)).astype(np.float32)
        if num_classes > 1:
            cls = 1 + index % (num_classes - 1)
            shapes = [cls]
            if rng.random() < 0.5:
                shapes.append(int(rng.integers(1, num_classes)))
            for shape_cls in shapes:
                cy = int(rng.integers(size // 4, 3 * size // 4))
                cx = int(rng.integers(size // 4, 3 * size // 4))
                extent = int(rng.integers(size // 5, size // 3))
                if shape_cls % 2:
                    mask = _paint_disk(label, shape_cls, cy, cx, extent)
                else:
                    mask = _paint_box(label, shape_cls, cy, cx, extent, extent)
                color = palette[shape_cls][:, None]
                jitter = rng.normal(0.0, 0.03, (3, 1)).astype(np.float32)
                image[:, mask] = color + jitter \
                    + rng.normal(0.0, 0.03, (3, int(mask.sum()))).astype(np.float32)
        np.clip(image, 0.0, 1.0, out=image)
        samples.append(ToySample(image, label, ignore_index))
    return samples


def dataset_mean(samples):
    """Per-channel mean over a sample list (the mean-subtraction statistic)."""
    if not samples:
        return np.zeros(3, np.float32)
    return np.mean([s.image.mean(axis=(1, 2)) for s in samples], axis=0) \
        .astype(np.float32)


def train_loop(net, dataset, iterations, batch_size, sched, state,
               augment_cfg=None, rng=None, ignore_index=IGNORE_INDEX):
    """Adam + poly-schedule optimization over random augmented batches.

    Returns the (iteration, lr, loss) history. Aborts on a non-finite loss,
    naming the offending iteration.
    """
    if iterations and not dataset:
        raise ValueError("cannot train on an empty dataset")
    if rng is None:
        rng = np.random.default_rng(0)
    if batch_size == 1:
        warnings.warn("batch size 1: batch statistics fall back to "
                      "instance statistics", stacklevel=2)
    params = list(net.named_parameters())
    history = []
    for it in range(iterations):
        lr = poly_lr(sched, it)
        picks = rng.integers(0, len(dataset), batch_size)
        batch = [dataset[i] for i in picks]
        if augment_cfg is not None:
            batch = [augment(s, augment_cfg, rng) for s in batch]
        images = Tensor(np.stack([s.image for s in batch]))
        labels = np.stack([s.label for s in batch])
        tape = GradTape()
        logits = net.forward(images, mode="train", tape=tape)
        loss = cross_entropy_loss(logits, labels, ignore_index, tape)
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise RuntimeError(f"non-finite loss at iteration {it}")
        tape.backward(loss, parameters=[t for _, t in params])
        adam_step(state, params, [t.grad for _, t in params], lr)
        history.append((it, lr, loss_value))
    return history


def confusion_matrix(pred, truth, num_classes, ignore_index=IGNORE_INDEX):
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ShapeError("prediction and truth shapes differ")
    valid = truth != ignore_index
    idx = truth[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes) \
        .reshape(num_classes, num_classes)


def miou(pred, truth, num_classes, ignore_index=IGNORE_INDEX):
    """Per-class IoU and their mean over non-ignored pixels.

    Classes absent from both prediction and truth are excluded from the
    mean (reported as NaN per class).
    """
    cm = confusion_matrix(pred, truth, num_classes, ignore_index)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    ious = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = denom > 0
    mean = float(ious[present].mean()) if present.any() else 0.0
    return ious, mean


def pixel_accuracy(pred, truth, ignore_index=IGNORE_INDEX):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    valid = truth != ignore_index
    if not valid.any():
        return 0.0
    return float((pred[valid] == truth[valid]).mean())


def evaluate(net, samples, mean=None, ignore_index=IGNORE_INDEX):
    """Pooled pixel accuracy and mIoU of argmax predictions on a sample list."""
    mean = np.zeros(3, np.float32) if mean is None else np.asarray(mean, np.float32)
    preds, truths = [], []
    for sample in samples:
        x = Tensor((sample.image - mean[:, None, None])[None])
        scores = net.forward(x, mode="infer")
        preds.append(scores.data[0].argmax(axis=0))
        truths.append(sample.label)
    pred = np.stack(preds)
    truth = np.stack(truths)
    _, mean_iou = miou(pred, truth, net.num_classes, ignore_index)
    return pixel_accuracy(pred, truth, ignore_index), mean_iou


def toy_variant(num_classes):
    """Width-reduced custom variant for desk-scale runs."""
    return VariantSpec("custom", (2,), (4,), init_channels=8,
                       cluster_widths=(16, 32), num_classes=num_classes)


def toy_protocol(num_classes, size, iterations, seed, base_lr=5e-4,
                 batch_size=4, train_count=64, holdout_count=16):
    """Desk-scale training run: build, train, and score on a held-out split.

    Returns (net, history, mean, accuracy, mean_iou).
    """
    train_set = gen_toy_dataset(num_classes, train_count, size, seed)
    holdout = gen_toy_dataset(num_classes, holdout_count, size, seed + 1)
    mean = dataset_mean(train_set)
    net = build_network(toy_variant(num_classes), seed=seed)
    net.input_mean[:] = mean
    history = []
    if iterations:
        sched = LRSchedule(base_lr, iterations)
        state = OptimizerState(base_lr=base_lr)
        cfg = AugmentConfig(crop_size=(size, size), flip_prob=0.5,
                            mean=tuple(mean), scales=(1.0,))
        history = train_loop(net, train_set, iterations, batch_size, sched,
                             state, cfg, rng=np.random.default_rng(seed))
    accuracy, mean_iou = evaluate(net, holdout, mean)
    return net, history, mean, accuracy, mean_iou
