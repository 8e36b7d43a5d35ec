"""Small differentiable classifier with hand-written reverse mode.

Every layer keeps what it needs from the forward pass and returns the
gradient with respect to its input from ``backward``; parameter gradients are
stored on the layer. Images enter as (N, C, H, W); layers work on
(C, N, H, W) so that convolutions reduce to one matrix product.
"""

import copy
import json
import struct
from dataclasses import dataclass, field

import numba
import numpy as np

from advtransfer.errors import InvalidArgument
from advtransfer.io import atomic_write_bytes

CHECKPOINT_MAGIC = b"PBMODEL1"


@numba.njit(cache=True)
def _im2col(x, k):
    c, n, h, w = x.shape
    p = k // 2
    cols = np.zeros((c * k * k, n, h, w))
    for ci in range(c):
        for a in range(k):
            for b in range(k):
                row = (ci * k + a) * k + b
                for ni in range(n):
                    for i in range(h):
                        ii = i + a - p
                        if ii < 0 or ii >= h:
                            continue
                        for j in range(w):
                            jj = j + b - p
                            if 0 <= jj < w:
                                cols[row, ni, i, j] = x[ci, ni, ii, jj]
    return cols


@numba.njit(cache=True)
def _col2im(dcols, c, k):
    _, n, h, w = dcols.shape
    p = k // 2
    dx = np.zeros((c, n, h, w))
    for ci in range(c):
        for a in range(k):
            for b in range(k):
                row = (ci * k + a) * k + b
                for ni in range(n):
                    for i in range(h):
                        ii = i + a - p
                        if ii < 0 or ii >= h:
                            continue
                        for j in range(w):
                            jj = j + b - p
                            if 0 <= jj < w:
                                dx[ci, ni, ii, jj] += dcols[row, ni, i, j]
    return dx


class Layer:
    kind = "layer"
    param_names = ()

    def params(self):
        return [getattr(self, n) for n in self.param_names]

    def grads(self):
        return [getattr(self, "d" + n) for n in self.param_names]

    def describe(self):
        return {"type": self.kind}

    def output_shape(self, in_shape):
        return in_shape


class Scale(Layer):
    """Fixed affine input map ``x * factor + offset``."""

    kind = "scale"

    def __init__(self, factor=1.0 / 255.0, offset=-0.5):
        self.factor = float(factor)
        self.offset = float(offset)

    def forward(self, x):
        return x * self.factor + self.offset

    def backward(self, dout, param_grads=True):
        return dout * self.factor

    def describe(self):
        return {"type": self.kind, "factor": self.factor, "offset": self.offset}


class Conv2d(Layer):
    """Stride-1 convolution with zero padding that preserves spatial size."""

    kind = "conv"
    param_names = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel_size=3):
        if kernel_size % 2 == 0:
            raise InvalidArgument("convolution kernel size must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        self.bias = np.zeros(out_channels)

    def init(self, rng):
        fan_in = self.in_channels * self.kernel_size**2
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = rng.uniform(-bound, bound, self.weight.shape)
        self.bias = rng.uniform(-bound, bound, self.bias.shape)

    def forward(self, x):
        c, n, h, w = x.shape
        cols = _im2col(np.ascontiguousarray(x), self.kernel_size).reshape(-1, n * h * w)
        self._cols = cols
        self._shape = x.shape
        out = self.weight.reshape(self.out_channels, -1) @ cols + self.bias[:, None]
        return out.reshape(self.out_channels, n, h, w)

    def backward(self, dout, param_grads=True):
        c, n, h, w = self._shape
        d2 = dout.reshape(self.out_channels, -1)
        wmat = self.weight.reshape(self.out_channels, -1)
        if param_grads:
            self.dweight = (d2 @ self._cols.T).reshape(self.weight.shape)
            self.dbias = d2.sum(axis=1)
        dcols = (wmat.T @ d2).reshape(-1, n, h, w)
        return _col2im(dcols, c, self.kernel_size)

    def describe(self):
        return {
            "type": self.kind,
            "in": self.in_channels,
            "out": self.out_channels,
            "kernel": self.kernel_size,
        }

    def output_shape(self, in_shape):
        return (self.out_channels,) + tuple(in_shape[1:])


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout, param_grads=True):
        return dout * self._mask


class MeanPool(Layer):
    kind = "meanpool"

    def __init__(self, size=2):
        self.size = size

    def forward(self, x):
        s = self.size
        c, n, h, w = x.shape
        if h % s or w % s:
            raise InvalidArgument(f"pool size {s} does not divide {h}x{w}")
        out = np.zeros((c, n, h // s, w // s))
        for a in range(s):
            for b in range(s):
                out += x[:, :, a::s, b::s]
        return out / (s * s)

    def backward(self, dout, param_grads=True):
        s = self.size
        c, n, h, w = dout.shape
        out = np.broadcast_to(dout[:, :, :, None, :, None] / (s * s), (c, n, h, s, w, s))
        return out.reshape(c, n, h * s, w * s)

    def describe(self):
        return {"type": self.kind, "size": self.size}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // self.size, w // self.size)


class Dense(Layer):
    """Fully connected layer over the input flattened in (C, H, W) order."""

    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features))
        self.bias = np.zeros(out_features)

    def init(self, rng):
        bound = 1.0 / np.sqrt(self.in_features)
        self.weight = rng.uniform(-bound, bound, self.weight.shape)
        self.bias = rng.uniform(-bound, bound, self.bias.shape)

    def forward(self, x):
        self._shape = x.shape
        if x.ndim == 4:
            x = x.transpose(1, 0, 2, 3)
        flat = x.reshape(x.shape[0], -1)
        self._x = flat
        return flat @ self.weight.T + self.bias

    def backward(self, dout, param_grads=True):
        if param_grads:
            self.dweight = dout.T @ self._x
            self.dbias = dout.sum(axis=0)
        dx = dout @ self.weight
        if len(self._shape) == 4:
            c, n, h, w = self._shape
            return dx.reshape(n, c, h, w).transpose(1, 0, 2, 3)
        return dx.reshape(self._shape)

    def describe(self):
        return {"type": self.kind, "in": self.in_features, "out": self.out_features}

    def output_shape(self, in_shape):
        return (self.out_features,)


_LAYER_TYPES = {
    "scale": lambda d: Scale(d["factor"], d["offset"]),
    "conv": lambda d: Conv2d(d["in"], d["out"], d["kernel"]),
    "relu": lambda d: ReLU(),
    "meanpool": lambda d: MeanPool(d["size"]),
    "dense": lambda d: Dense(d["in"], d["out"]),
}


class Classifier:
    """Sequential classifier mapping (N, C, H, W) images to (N, classes) logits."""

    def __init__(self, layers, input_shape, num_classes):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.num_classes,):
            raise InvalidArgument(f"architecture produces shape {shape}, expected ({num_classes},)")

    @classmethod
    def from_descriptor(cls, descriptor):
        layers = [_LAYER_TYPES[d["type"]](d) for d in descriptor["layers"]]
        return cls(layers, descriptor["input_shape"], descriptor["num_classes"])

    def descriptor(self):
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.describe() for layer in self.layers],
        }

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def set_parameters(self, values):
        values = list(values)
        for layer in self.layers:
            for name in layer.param_names:
                current = getattr(layer, name)
                new = np.asarray(values.pop(0), dtype=np.float64)
                if new.shape != current.shape:
                    raise InvalidArgument(f"parameter shape {new.shape} != {current.shape}")
                setattr(layer, name, new.copy())
        if values:
            raise InvalidArgument("too many parameter tensors")

    def gradients(self):
        return [g for layer in self.layers for g in layer.grads()]

    def copy(self):
        # forward-pass caches are dropped so copies stay small
        memo = {}
        for layer in self.layers:
            for key, value in vars(layer).items():
                if key.startswith("_"):
                    memo[id(value)] = None
        return copy.deepcopy(self, memo)

    def _batched(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise InvalidArgument(f"input shape {x.shape} does not match model input {self.input_shape}")
        return x, single

    def forward(self, x):
        x, single = self._batched(x)
        if x.ndim == 4:
            # layers run on (C, N, H, W)
            x = x.transpose(1, 0, 2, 3)
        for layer in self.layers:
            x = layer.forward(x)
        return x[0] if single else x

    def backward(self, dlogits, param_grads=True):
        """Gradient w.r.t. the (N, C, H, W) input of the last forward call.

        With ``param_grads`` the layers also store parameter gradients.
        """
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d, param_grads)
        return d.transpose(1, 0, 2, 3) if d.ndim == 4 else d

    def predict(self, x, batch_size=256):
        x, single = self._batched(x)
        preds = np.concatenate(
            [self.forward(x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        )
        return preds[0] if single else preds


def reference_cnn(input_shape=(3, 32, 32), num_classes=4, rng=None):
    """conv(3->8) -> ReLU -> pool -> conv(8->16) -> ReLU -> pool -> dense."""
    c, h, w = input_shape
    layers = [
        Scale(),
        Conv2d(c, 8, 3),
        ReLU(),
        MeanPool(2),
        Conv2d(8, 16, 3),
        ReLU(),
        MeanPool(2),
        Dense(16 * (h // 4) * (w // 4), num_classes),
    ]
    model = Classifier(layers, input_shape, num_classes)
    init_parameters(model, rng if rng is not None else np.random.default_rng(0))
    return model


def linear_model(input_shape, num_classes, weight=None, bias=None):
    dense = Dense(int(np.prod(input_shape)), num_classes)
    if weight is not None:
        dense.weight = np.asarray(weight, dtype=np.float64).reshape(dense.weight.shape).copy()
    if bias is not None:
        dense.bias = np.asarray(bias, dtype=np.float64).reshape(dense.bias.shape).copy()
    return Classifier([dense], input_shape, num_classes)


def init_parameters(model, rng):
    for layer in model.layers:
        if hasattr(layer, "init"):
            layer.init(rng)


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, y):
    """Per-example cross-entropy ``logsumexp(logits) - logits[y]``."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    num_classes = logits.shape[-1]
    if np.any(y < 0) or np.any(y >= num_classes):
        raise InvalidArgument(f"class index out of range [0, {num_classes})")
    lsm = log_softmax(logits)
    if logits.ndim == 1:
        return float(-lsm[int(y)])
    return -np.take_along_axis(lsm, y.reshape(-1, 1).astype(np.intp), axis=1)[:, 0]


def loss_and_input_gradient(model, x, y):
    """Per-example loss and the gradient of each example's loss w.r.t. its input."""
    x, single = model._batched(x)
    y = np.broadcast_to(np.asarray(y), (len(x),))
    logits = model.forward(x)
    losses = cross_entropy(logits, y)
    probs = np.exp(log_softmax(logits))
    probs[np.arange(len(x)), y] -= 1.0
    grad = model.backward(probs, param_grads=False)
    if single:
        return losses[0], grad[0], logits[0]
    return losses, grad, logits


def input_gradient(model, x, y_target):
    """Gradient of the cross-entropy toward ``y_target`` w.r.t. the input image(s)."""
    return loss_and_input_gradient(model, x, y_target)[1]


def forward(model, x):
    return model.forward(x)


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InvalidArgument("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgument(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.05
    warmup_epochs: int = 2
    decay_epochs: tuple = (15, 25)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-6

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument("epochs and batch size must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise InvalidArgument("decay epochs must be strictly increasing")
        if any(e >= self.epochs for e in self.decay_epochs):
            raise InvalidArgument("decay epochs must be earlier than the final epoch")
        if not 0 < self.decay_factor <= 1:
            raise InvalidArgument("decay factor must lie in (0, 1]")

    def lr_at(self, epoch, progress):
        """Learning rate during ``epoch`` (0-based) at fractional ``progress`` in (0, 1].

        Warmup ramps linearly from zero so that the rate at the end of epoch k
        (1-based) is base * k / warmup_epochs.
        """
        if epoch < self.warmup_epochs:
            return self.base_lr * (epoch + progress) / self.warmup_epochs
        passed = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.base_lr * self.decay_factor**passed


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    accuracy: float
    extra: dict = field(default_factory=dict)


def sgd_step(model, velocity, xb, yb, lr, sched):
    """One momentum-SGD step on the mean cross-entropy of a batch; returns (loss, correct)."""
    logits = model.forward(xb)
    losses = cross_entropy(logits, yb)
    probs = np.exp(log_softmax(logits))
    probs[np.arange(len(yb)), yb] -= 1.0
    model.backward(probs / len(yb))
    for layer in model.layers:
        for name in layer.param_names:
            p = getattr(layer, name)
            g = getattr(layer, "d" + name) + sched.weight_decay * p
            v = velocity.setdefault((id(layer), name), np.zeros_like(p))
            v *= sched.momentum
            v += g
            setattr(layer, name, p - lr * v)
    return float(losses.sum()), int((logits.argmax(axis=1) == yb).sum())


def train_loop(model, data, sched, rng, perturb=None, on_batch=None, on_epoch=None):
    """Shared epoch/batch loop for clean and adversarial training.

    ``perturb(model, xb, yb)`` may replace a batch before the update; it
    returns the images to train on plus a dict of per-batch statistics.
    ``on_epoch(model, log)`` may add entries to ``log.extra`` after each epoch.
    """
    if len(data) == 0:
        raise InvalidArgument("cannot train on an empty dataset")
    model = model.copy()
    velocity = {}
    n = len(data)
    n_batches = (n + sched.batch_size - 1) // sched.batch_size
    logs = []
    for epoch in range(sched.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        stats = []
        lr = 0.0
        for b in range(n_batches):
            idx = order[b * sched.batch_size : (b + 1) * sched.batch_size]
            xb, yb = data.images[idx], data.labels[idx]
            info = {}
            if perturb is not None:
                xb, info = perturb(model, xb, yb)
            if on_batch is not None:
                on_batch(xb, yb, info)
            lr = sched.lr_at(epoch, (b + 1) / n_batches)
            loss, c = sgd_step(model, velocity, xb, yb, lr, sched)
            total_loss += loss
            correct += c
            stats.append(info)
        log = EpochLog(epoch + 1, lr, total_loss / n, correct / n, {"batches": stats})
        if on_epoch is not None:
            on_epoch(model, log)
        logs.append(log)
    return model, logs


def sgd_train(model, data, sched, rng):
    """Plain SGD training. Returns the trained copy and a per-epoch log."""
    return train_loop(model, data, sched, rng)


def accuracy(model, data):
    return float(np.mean(model.predict(data.images) == data.labels))


def save_checkpoint(model, path):
    """Write ``model`` in the PBMODEL1 format (see README for the layout)."""
    desc = json.dumps(model.descriptor(), sort_keys=True).encode("utf-8")
    params = model.parameters()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(desc)), desc, struct.pack("<I", len(params))]
    for p in params:
        chunks.append(struct.pack("<I", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise InvalidArgument(f"{path}: not a model checkpoint (bad magic)")
    pos = 8
    (dlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    desc = json.loads(blob[pos : pos + dlen].decode("utf-8"))
    pos += dlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape))
        params.append(np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * size
    model = Classifier.from_descriptor(desc)
    model.set_parameters(params)
    return model
