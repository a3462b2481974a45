"""Desk-scale training: synthetic shape/colour data, SGD with momentum, curves."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from salg.imageio import read_ppm, write_ppm
from salg.model import forward_classify, init_params
from salg.tensor import cross_entropy

SHAPES = ("disk", "square", "triangle", "ring", "cross")
PALETTE = ((0.9, 0.2, 0.15), (0.15, 0.35, 0.9))


class TrainingError(RuntimeError):
    pass


def _shape_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "triangle":
        return (dy <= 0.7 * r) & (dy >= -r + 2 * np.abs(dx))
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    raise ValueError(f"unknown shape {kind!r}")


def make_shape_dataset(n=500, size=112, num_classes=10, seed=0):
    """Images of one coloured shape on a noisy background.

    Class ``k`` is shape ``k % 5`` in colour family ``k // 5``; position,
    radius, hue jitter and background noise are random. Returns
    ``(images (n, size, size, 3) in [0, 1], labels (n,))`` with classes
    balanced and interleaved.
    """
    if not 1 <= num_classes <= len(SHAPES) * len(PALETTE):
        raise ValueError(f"num_classes must be in 1..{len(SHAPES) * len(PALETTE)}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size, 3))
    labels = np.arange(n) % num_classes
    for i, label in enumerate(labels):
        kind = SHAPES[label % len(SHAPES)]
        colour = np.array(PALETTE[label // len(SHAPES)]) + rng.uniform(-0.1, 0.1, 3)
        r = rng.uniform(0.18, 0.3) * size
        cy, cx = rng.uniform(r, size - r, 2)
        bg = 0.35 + 0.1 * rng.standard_normal((size, size, 1)) * np.ones(3)
        mask = _shape_mask(kind, yy, xx, cy, cx, r)[..., None]
        images[i] = np.clip(np.where(mask, colour, bg), 0.0, 1.0)
    return images, labels


def write_image_folder(root, images, labels):
    """Store a dataset as ``root/class_XX/NNNN.ppm``."""
    for i, (img, label) in enumerate(zip(images, labels)):
        d = os.path.join(root, f"class_{int(label):02d}")
        os.makedirs(d, exist_ok=True)
        write_ppm(os.path.join(d, f"{i:04d}.ppm"), img)


def load_image_folder(root):
    """Load ``root/<class>/*.ppm``; classes are the sorted subdirectory names.

    Returns ``(images, labels, class_names)``. Raises TrainingError when no
    images are found or sizes disagree.
    """
    if not os.path.isdir(root):
        raise TrainingError(f"dataset directory {root!r} does not exist")
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    images, labels = [], []
    for label, name in enumerate(classes):
        folder = os.path.join(root, name)
        for fname in sorted(os.listdir(folder)):
            if fname.lower().endswith(".ppm"):
                images.append(read_ppm(os.path.join(folder, fname)))
                labels.append(label)
    if not images:
        raise TrainingError(f"no PPM images found under {root!r}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise TrainingError(f"images have differing sizes: {sorted(shapes)}")
    return np.stack(images), np.array(labels, dtype=np.int64), classes


class SGD:
    """Plain SGD with heavy-ball momentum, optional weight decay and
    optional clipping of the global gradient norm to ``clip_norm``."""

    def __init__(self, params, lr=0.005, momentum=0.9, weight_decay=0.0, clip_norm=None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.vdot(p.grad, p.grad))
                                 for p in self.params.values() if p.grad is not None)))

    def step(self):
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class TrainingCurve:
    loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def rows(self):
        return [(i + 1, l, a) for i, (l, a) in enumerate(zip(self.loss, self.train_acc))]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "train_acc"])
            for epoch, loss, acc in self.rows():
                w.writerow([epoch, repr(float(loss)), repr(float(acc))])


def normalize_images(images):
    return (np.asarray(images, dtype=np.float64) - 0.5) / 0.25


def toy_train(images, labels, config, epochs=100, lr=0.005, momentum=0.9, weight_decay=0.0,
              clip_norm=1.0, batch_size=10, seed=0, target_acc=None, params=None, log=None):
    """Minimise mean cross-entropy with minibatch SGD + momentum.

    The sample order is reshuffled each epoch from ``seed``, so reruns give
    identical curves. Per-epoch loss and accuracy are averages over the
    epoch's minibatches. With ``target_acc`` set, training stops after the
    first epoch reaching it. Returns ``(params, curve)``.
    """
    images = normalize_images(images)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or len(images) == 0:
        raise TrainingError("dataset is empty")
    if len(images) != len(labels):
        raise TrainingError(f"{len(images)} images but {len(labels)} labels")
    if images.shape[1] != config.input_size or images.shape[2] != config.input_size:
        raise TrainingError(f"images are {images.shape[1]}x{images.shape[2]}, "
                            f"config expects {config.input_size}")
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise TrainingError(f"labels must lie in 0..{config.num_classes - 1}")

    if params is None:
        params = init_params(config, seed)
    opt = SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay, clip_norm=clip_norm)
    rng = np.random.default_rng(seed)
    curve = TrainingCurve()
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, _ = forward_classify(images[idx], params, config)
            loss = cross_entropy(logits, labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch + 1}, "
                                    f"batch starting at {start}; lower the learning rate")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        curve.loss.append(total_loss / n)
        curve.train_acc.append(correct / n)
        if log is not None:
            log(epoch + 1, curve.loss[-1], curve.train_acc[-1])
        if target_acc is not None and curve.train_acc[-1] >= target_acc:
            break
    return params, curve
