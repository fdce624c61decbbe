"""Desk-scale convolutional autoencoder with hand-written gradients.

Encoder: two stride-2 5x5 convolutions (ReLU after the first only).
Decoder: two stride-2 5x5 transposed convolutions, defined as the exact
adjoint of the encoder convolution (ReLU after the first only).
The loss is ``lam * D`` with ``D`` the mean squared error on the 0..255
scale; there is no latent quantizer and no rate term.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .store import FloatModel, WeightTensor

PIXEL_MAX = 255.0


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient stops being finite.

    ``last_good`` holds the network state from before the failing step.
    """

    def __init__(self, msg, last_good=None, iteration=None):
        super().__init__(msg)
        self.last_good = last_good
        self.iteration = iteration


class StateError(RuntimeError):
    pass


@dataclass
class Layer:
    kind: str            # "conv" or "deconv"
    weight: np.ndarray   # (out, in, k, k)
    bias: np.ndarray     # (out,)
    relu: bool
    slope: float = 0.0   # 0 -> ReLU, >0 -> leaky ReLU

    @property
    def k(self) -> int:
        return self.weight.shape[2]


def relu(x, slope=0.0):
    return np.where(x > 0, x, slope * x)


def relu_grad(pre, slope=0.0):
    return np.where(pre > 0, 1.0, slope)


def leaky_relu(x, slope=0.01):
    return relu(x, slope)


def conv2d(x, w, b=None):
    y = kernels.conv_forward(x, w)
    return y if b is None else y + b[None, :, None, None]


def deconv2d(x, w, out_hw, b=None):
    # w is (out, in, k, k); the adjoint conv sees it as (in, out, k, k)
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3))
    y = kernels.conv_backward_input(x, wt, out_hw[0], out_hw[1])
    return y if b is None else y + b[None, :, None, None]


@dataclass
class ForwardCache:
    x: np.ndarray
    inputs: list
    pre: list
    out: np.ndarray


@dataclass
class ToyAutoencoder:
    layers: list[Layer]
    cache: ForwardCache | None = field(default=None, repr=False)

    @classmethod
    def init(cls, seed: int = 0, channels=(3, 8, 8), kernel: int = 5, gain: float = 0.5):
        """He-style init scaled by ``gain``.

        Full He scale puts the first SGD steps at the edge of stability for
        the default step size, and a few seeds blow up; half scale does not.
        """
        rng = np.random.default_rng(seed)
        c0, c1, c2 = channels
        plan = [("conv", c1, c0, True), ("conv", c2, c1, False), ("deconv", c1, c2, True), ("deconv", c0, c1, False)]
        layers = []
        for kind, o, i, act in plan:
            # deconv taps are spread over 4 output phases, so fan-in is a quarter
            fan_in = i * kernel * kernel / (4.0 if kind == "deconv" else 1.0)
            std = gain * math.sqrt((2.0 if act else 1.0) / fan_in)
            w = rng.normal(0.0, std, size=(o, i, kernel, kernel))
            layers.append(Layer(kind, w, np.zeros(o), act))
        return cls(layers)

    def copy(self) -> "ToyAutoencoder":
        return ToyAutoencoder(copy.deepcopy(self.layers))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def weights_model(self) -> FloatModel:
        return FloatModel([WeightTensor(l.weight.copy()) for l in self.layers])

    def biases_model(self) -> FloatModel:
        return FloatModel([WeightTensor(l.bias.reshape(-1, 1, 1, 1).copy()) for l in self.layers])

    def with_weights(self, model: FloatModel) -> "ToyAutoencoder":
        if len(model.tensors) != len(self.layers):
            raise ValueError(f"expected {len(self.layers)} weight tensors, got {len(model.tensors)}")
        net = self.copy()
        for layer, t in zip(net.layers, model.tensors):
            if t.values.shape != layer.weight.shape:
                raise ValueError(f"weight shape {t.values.shape} != {layer.weight.shape}")
            layer.weight = t.values.copy()
        return net

    @classmethod
    def from_models(cls, weights: FloatModel, biases: FloatModel | None = None) -> "ToyAutoencoder":
        """Rebuild the standard four-layer topology from stored tensors."""
        if len(weights.tensors) != 4:
            raise ValueError("the toy autoencoder has exactly four layers")
        kinds = [("conv", True), ("conv", False), ("deconv", True), ("deconv", False)]
        layers = []
        for k, ((kind, act), t) in enumerate(zip(kinds, weights.tensors)):
            w = t.values.copy()
            b = np.zeros(w.shape[0]) if biases is None else biases.tensors[k].values.reshape(-1).copy()
            if b.size != w.shape[0]:
                raise ValueError(f"layer {k}: bias length {b.size} != {w.shape[0]}")
            layers.append(Layer(kind, w, b, act))
        return cls(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.layers[0].weight.shape[1]:
            raise ValueError(f"expected input (B, {self.layers[0].weight.shape[1]}, H, W), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial size {x.shape[2:]} must be divisible by 4")
        inputs, pre = [], []
        h = x
        sizes = []
        for layer in self.layers:
            inputs.append(h)
            if layer.kind == "conv":
                sizes.append(h.shape[2:])
                z = conv2d(h, layer.weight, layer.bias)
            else:
                z = deconv2d(h, layer.weight, sizes.pop(), layer.bias)
            pre.append(z)
            h = relu(z, layer.slope) if layer.relu else z
        self.cache = ForwardCache(x, inputs, pre, h)
        return h

    def backward(self, target: np.ndarray, lam: float) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
        """Loss ``lam * 255**2 * mean((out - target)**2)`` and its parameter gradients."""
        c = self.cache
        if c is None:
            raise StateError("backward called without a forward pass")
        diff = c.out - target
        scale = lam * PIXEL_MAX**2
        loss = scale * float(np.mean(diff * diff))
        g = (2.0 * scale / diff.size) * diff
        grads = [None] * len(self.layers)
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            if layer.relu:
                g = g * relu_grad(c.pre[idx], layer.slope)
            gb = g.sum(axis=(0, 2, 3))
            h = c.inputs[idx]
            if layer.kind == "conv":
                gw = kernels.conv_backward_weight(h, g, layer.k)
                g = kernels.conv_backward_input(g, layer.weight, h.shape[2], h.shape[3]) if idx else None
            else:
                # deconv(h) = conv_adjoint(h; W^T): swap the roles of input and output
                gw = kernels.conv_backward_weight(g, h, layer.k).transpose(1, 0, 2, 3)
                g = kernels.conv_forward(g, np.ascontiguousarray(layer.weight.transpose(1, 0, 2, 3))) if idx else None
            grads[idx] = (np.ascontiguousarray(gw), gb)
        return loss, grads


def sgd_step(net: ToyAutoencoder, grads, lr: float, masks=None) -> ToyAutoencoder:
    """In-place plain SGD; ``masks`` (one per layer weight) zero gradient entries."""
    for k, (gw, gb) in enumerate(grads):
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise DivergenceError(f"non-finite gradient in layer {k}")
    for k, (layer, (gw, gb)) in enumerate(zip(net.layers, grads)):
        if masks is not None and masks[k] is not None:
            gw = gw * masks[k]
        layer.weight -= lr * gw
        layer.bias -= lr * gb
    return net


def synth_dataset(seed: int, count: int, patch: int = 16) -> np.ndarray:
    """Images in [0, 1]: a smooth colour ramp with up to three flat rectangles."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, patch), np.linspace(0, 1, patch), indexing="ij")
    base = rng.uniform(0.1, 0.9, size=(count, 3, 1, 1))
    gx = rng.uniform(-0.5, 0.5, size=(count, 3, 1, 1))
    gy = rng.uniform(-0.5, 0.5, size=(count, 3, 1, 1))
    img = base + gx * (xx - 0.5) + gy * (yy - 0.5)
    for _ in range(3):
        present = rng.random(count) < 0.7
        y0, x0 = rng.integers(0, patch - 2, size=(2, count))
        hgt, wid = rng.integers(2, patch // 2 + 1, size=(2, count))
        colour = rng.uniform(0, 1, size=(count, 3))
        alpha = rng.uniform(0.5, 1.0, size=count)
        for n in np.flatnonzero(present):
            sl = (n, slice(None), slice(y0[n], y0[n] + hgt[n]), slice(x0[n], x0[n] + wid[n]))
            img[sl] = (1 - alpha[n]) * img[sl] + alpha[n] * colour[n][:, None, None]
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class EvalResult:
    mse: float
    psnr: float


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def evaluate(net: ToyAutoencoder, images: np.ndarray, quantized=None, batch: int = 64) -> EvalResult:
    """Reconstruction MSE on [0, 1] pixels; ``quantized`` weights are swapped in if given."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    if quantized is not None:
        from .quantizer import dequantize_model

        net = net.with_weights(dequantize_model(quantized))
    sq = 0.0
    for s in range(0, len(images), batch):
        x = images[s:s + batch]
        out = net.forward(x)
        sq += float(np.sum((out - x) ** 2))
    mse = sq / images.size
    return EvalResult(mse, psnr_from_mse(mse))


@dataclass
class TrainConfig:
    lam: float = 0.015
    lr: float = 1e-3
    i1: int = 5000
    i2: int = 500
    batch: int = 8
    seed: int = 0
    patch: int = 16
    pool: int = 256
    eval_count: int = 64

    def __post_init__(self):
        if self.i1 < 0 or self.i2 < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if self.batch < 1 or self.pool < 1 or self.eval_count < 1:
            raise ValueError("batch, pool and eval_count must be >= 1")
        if self.patch % 4:
            raise ValueError("patch size must be divisible by 4")

    def train_images(self) -> np.ndarray:
        return synth_dataset(self.seed, self.pool, self.patch)

    def eval_images(self) -> np.ndarray:
        return synth_dataset(self.seed + 100_003, self.eval_count, self.patch)


def batches(cfg: TrainConfig, stream: int):
    """Deterministic batch index stream; ``stream`` separates training phases."""
    rng = np.random.default_rng([cfg.seed, stream])
    while True:
        yield rng.integers(0, cfg.pool, size=cfg.batch)


def train(net: ToyAutoencoder, cfg: TrainConfig, iters: int | None = None, log=None, log_every: int = 100,
          images: np.ndarray | None = None, stream: int = 1) -> ToyAutoencoder:
    """Plain SGD on ``lam * D`` for ``iters`` steps (default ``cfg.i1``), in place."""
    iters = cfg.i1 if iters is None else iters
    images = cfg.train_images() if images is None else images
    idx_stream = batches(cfg, stream)
    good = None
    for it in range(iters):
        x = images[next(idx_stream)]
        with np.errstate(over="ignore", invalid="ignore"):
            # a blow-up is reported through the finiteness checks below
            net.forward(x)
            loss, grads = net.backward(x, cfg.lam)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}", last_good=good, iteration=it)
        good = net.copy()
        try:
            sgd_step(net, grads, cfg.lr)
        except DivergenceError as e:
            raise DivergenceError(str(e), last_good=good, iteration=it) from None
        if log is not None and (it % log_every == 0 or it == iters - 1):
            log({"phase": "train", "iteration": it, "loss": loss, "mse": loss / (cfg.lam * PIXEL_MAX**2)})
    return net
