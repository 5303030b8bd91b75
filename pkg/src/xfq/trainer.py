"""Toy CNN training with cross-filter quantized weights.

Each step re-quantizes the full-precision shadow weights of every quantized
layer, runs the forward pass on the dequantized weights (and, in XNOR mode,
on sign-quantized layer inputs), backpropagates with a straight-through
estimator, updates the shadow weights and finally the learning rate.

Activations inside the trainer are ``(N, H, W, C)`` arrays.

Gradient options (``ste`` x ``alpha_grad``):

``ste="clipped"``
    d sign(r)/dr = 1 for |r| <= 1, else 0 (default).
``ste="literal"``
    d sign(r)/dr = r for |r| <= 1, else 0.  The published per-element formula
    carries this extra factor ``r``; it is most likely a typo, kept for
    comparison.
``ste="none"``
    no pass-through: only the locally exact derivative remains.
``alpha_grad="diagonal"``
    each weight sees ``g_i / n`` from the scale (the published formula).
``alpha_grad="full"``
    the exact scale path ``sign(w_i)/n * sum_j g_j B_j`` coupling all members
    of a group.

``ste="none", alpha_grad="full"`` is the true derivative of the quantized
loss away from sign flips, which is what finite differences measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset
from .errors import GradCheckError, ShapeError, StaleCacheError, TrainingDivergedError
from .quantizer import Mode, QuantizedLayer, filter_rows, quantize_layer, rows_to_weight
from .tensor import Distribution, seeded_random_tensor

__all__ = [
    "QuantConfig",
    "Conv",
    "Dense",
    "ReLU",
    "Sign",
    "MaxPool2",
    "ToyNet",
    "TrainConfig",
    "EpochMetrics",
    "GradReport",
    "make_toy_net",
    "forward",
    "backward",
    "predict",
    "accuracy",
    "train",
    "grad_check",
    "shadow_to_quantized",
]

STE_MODES = ("clipped", "literal", "none")
ALPHA_MODES = ("diagonal", "full")


@dataclass
class QuantConfig:
    mode: Mode = Mode.FP
    beta: int = 1
    quantize: bool = True

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.beta < 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")

    @property
    def active(self) -> bool:
        return self.quantize and self.mode is not Mode.FP


@dataclass
class Conv:
    weight: np.ndarray  # (k_h, k_w, i_c, o_c)
    stride: int = 1
    padding: int = 0
    quant: QuantConfig = field(default_factory=QuantConfig)

    def params(self):
        return {"weight": self.weight}

    def out_shape(self, shape):
        h, w, c = shape
        k_h, k_w, i_c, o_c = self.weight.shape
        if c != i_c:
            raise ShapeError("conv input channels", i_c, c)
        o_h = (h + 2 * self.padding - k_h) // self.stride + 1
        o_w = (w + 2 * self.padding - k_w) // self.stride + 1
        if o_h < 1 or o_w < 1:
            raise ShapeError("conv output size", ">= 1", (o_h, o_w))
        return (o_h, o_w, o_c)


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray
    quant: QuantConfig = field(default_factory=QuantConfig)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, shape):
        n_in = int(np.prod(shape))
        if n_in != self.weight.shape[0]:
            raise ShapeError("dense input features", self.weight.shape[0], n_in)
        return (self.weight.shape[1],)


class ReLU:
    def params(self):
        return {}

    def out_shape(self, shape):
        return shape


class Sign:
    """Parameter-free sign nonlinearity with a pass-through gradient."""

    def params(self):
        return {}

    def out_shape(self, shape):
        return shape


class MaxPool2:
    def params(self):
        return {}

    def out_shape(self, shape):
        h, w, c = shape
        if h % 2 or w % 2:
            raise ShapeError("max-pool input size (must be even)", "even", (h, w))
        return (h // 2, w // 2, c)


class ToyNet:
    def __init__(self, layers, input_shape, n_classes: int):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.version = 0
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (n_classes,):
            raise ShapeError("network output", (n_classes,), shape)

    def weight_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, (Conv, Dense))]

    def copy(self) -> "ToyNet":
        layers = []
        for l in self.layers:
            if isinstance(l, Conv):
                layers.append(Conv(l.weight.copy(), l.stride, l.padding, QuantConfig(**vars(l.quant))))
            elif isinstance(l, Dense):
                layers.append(Dense(l.weight.copy(), l.bias.copy(), QuantConfig(**vars(l.quant))))
            else:
                layers.append(type(l)())
        return ToyNet(layers, self.input_shape, self.n_classes)

    def quantized_layers(self) -> list[QuantizedLayer]:
        return [
            shadow_to_quantized(l.weight, l.quant)
            for _, l in self.weight_layers()
            if l.quant.active
        ]


def _as_4d(w: np.ndarray) -> np.ndarray:
    return w if w.ndim == 4 else w.reshape(1, 1, *w.shape)


def shadow_to_quantized(weight: np.ndarray, quant: QuantConfig) -> QuantizedLayer:
    """Quantize a shadow weight (conv or dense) with its layer's config."""
    return quantize_layer(_as_4d(weight), quant.beta, quant.mode)


def _dequantized(weight: np.ndarray, quant: QuantConfig):
    q = shadow_to_quantized(weight, quant)
    return q.dequantize().data.reshape(weight.shape), q


def make_toy_net(
    input_shape=(8, 8, 1),
    n_classes: int = 2,
    channels=(8,),
    mode: Mode | str = Mode.BW,
    beta: int = 1,
    seed: int = 0,
    quantize_first: bool = False,
    quantize_last: bool = False,
    pool: bool = True,
) -> ToyNet:
    """``[conv3x3 -> relu] * len(channels) -> maxpool -> dense``.

    Middle layers are quantized whenever ``mode`` is not FP; the first conv and
    the final dense layer only when asked to.
    """
    mode = Mode(mode)
    layers = []
    shape = tuple(input_shape)
    n_weight_layers = len(channels) + 1
    for i, c_out in enumerate(channels):
        c_in = shape[2]
        fan_in = 9 * c_in
        bound = min(1.0, math.sqrt(6.0 / fan_in))
        w = seeded_random_tensor((3, 3, c_in, c_out), seed + i, Distribution.UNIFORM).data * bound
        q = QuantConfig(mode, beta, quantize_first if i == 0 else True)
        layers += [Conv(np.array(w), 1, 1, q), ReLU()]
        shape = layers[-2].out_shape(shape)
    if pool:
        layers.append(MaxPool2())
        shape = layers[-1].out_shape(shape)
    n_in = int(np.prod(shape))
    bound = math.sqrt(6.0 / (n_in + n_classes))
    w = seeded_random_tensor((1, 1, n_in, n_classes), seed + n_weight_layers, Distribution.UNIFORM).data
    q = QuantConfig(mode, beta, quantize_last)
    layers.append(Dense(np.array(w.reshape(n_in, n_classes)) * bound, np.zeros(n_classes), q))
    return ToyNet(layers, input_shape, n_classes)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _pad(x, p, value=0.0):
    if p == 0:
        return x
    if np.ndim(value) == 0:
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=value)
    out = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    ring = np.ones(out.shape[1:3], dtype=bool)
    ring[p:-p, p:-p] = False
    out[:, ring, :] = np.asarray(value).reshape(-1, 1, 1)
    return out


def _conv_forward(xp, w, stride):
    k_h, k_w = w.shape[:2]
    n, hp, wp, _ = xp.shape
    o_h = (hp - k_h) // stride + 1
    o_w = (wp - k_w) // stride + 1
    out = np.zeros((n, o_h, o_w, w.shape[3]))
    for dy in range(k_h):
        for dx in range(k_w):
            patch = xp[:, dy : dy + stride * (o_h - 1) + 1 : stride, dx : dx + stride * (o_w - 1) + 1 : stride]
            out += patch @ w[dy, dx]
    return out


def _conv_backward(xp, w, stride, g):
    k_h, k_w = w.shape[:2]
    o_h, o_w = g.shape[1:3]
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for dy in range(k_h):
        for dx in range(k_w):
            sl = (slice(None), slice(dy, dy + stride * (o_h - 1) + 1, stride), slice(dx, dx + stride * (o_w - 1) + 1, stride))
            dw[dy, dx] = np.einsum("nhwc,nhwo->co", xp[sl], g)
            dxp[sl] += g @ w[dy, dx].T
    return dw, dxp


def _ste(r, ste: str):
    inside = np.abs(r) <= 1
    if ste == "clipped":
        return inside.astype(np.float64)
    if ste == "literal":
        return np.where(inside, r, 0.0)
    return np.zeros_like(r)


def _sign(x):
    return np.where(x >= 0, 1.0, -1.0)


@dataclass
class _LayerCache:
    x: np.ndarray | None = None  # layer input (pre-quantization)
    xp: np.ndarray | None = None  # padded (possibly quantized) input actually convolved
    w_eff: np.ndarray | None = None
    qlayer: QuantizedLayer | None = None
    act_scale: np.ndarray | None = None
    mask: np.ndarray | None = None
    argmax: np.ndarray | None = None


@dataclass
class Cache:
    version: int
    layers: list
    probs: np.ndarray
    labels: np.ndarray
    pattern: list

    def same_pattern(self, other: "Cache") -> bool:
        return len(self.pattern) == len(other.pattern) and all(
            np.array_equal(a, b) for a, b in zip(self.pattern, other.pattern)
        )


def forward(net: ToyNet, x, y, overrides=None):
    """Run the net on ``x`` (N, H, W, C); returns ``(logits, loss, cache)``.

    ``overrides`` maps a layer index to an effective weight used verbatim in
    place of the quantized shadow weight (used to probe d loss / d W_hat).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 4 or tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError("batch shape", ("N",) + net.input_shape, x.shape)
    if y.shape != (x.shape[0],):
        raise ShapeError("label shape", (x.shape[0],), y.shape)
    if not np.isfinite(x).all():
        raise ValueError("input batch contains non-finite values")
    overrides = overrides or {}
    caches, pattern = [], []
    h = x
    for idx, layer in enumerate(net.layers):
        c = _LayerCache(x=h)
        if isinstance(layer, (Conv, Dense)):
            q = layer.quant
            if idx in overrides:
                c.w_eff = np.asarray(overrides[idx], dtype=np.float64)
            elif q.active:
                c.w_eff, c.qlayer = _dequantized(layer.weight, q)
            else:
                c.w_eff = layer.weight
            if q.active:
                pattern.append(c.w_eff >= 0)
            inp = h
            xnor = q.active and Mode(q.mode) is Mode.XNOR
            if isinstance(layer, Dense):
                inp = h.reshape(h.shape[0], -1)
            if xnor:
                axes = tuple(range(1, inp.ndim))
                c.act_scale = np.abs(inp).mean(axis=axes)
                s = c.act_scale.reshape((-1,) + (1,) * (inp.ndim - 1))
                inp = s * _sign(inp)
                pattern.append(inp > 0)
            if isinstance(layer, Conv):
                pad_value = c.act_scale if xnor else 0.0
                c.xp = _pad(inp, layer.padding, pad_value)
                h = _conv_forward(c.xp, c.w_eff, layer.stride)
            else:
                c.xp = inp
                h = inp @ c.w_eff + layer.bias
        elif isinstance(layer, ReLU):
            c.mask = h > 0
            pattern.append(c.mask)
            h = np.where(c.mask, h, 0.0)
        elif isinstance(layer, Sign):
            pattern.append(h >= 0)
            h = _sign(h)
        elif isinstance(layer, MaxPool2):
            n, hh, ww, ch = h.shape
            win = h.reshape(n, hh // 2, 2, ww // 2, 2, ch).transpose(0, 1, 3, 5, 2, 4).reshape(n, hh // 2, ww // 2, ch, 4)
            c.argmax = win.argmax(axis=-1)
            # structural ties (equal values up to rounding) are not kinks
            top2 = np.sort(win, axis=-1)[..., -2:]
            tied = top2[..., 1] - top2[..., 0] <= 1e-12 * np.maximum(1.0, np.abs(top2[..., 1]))
            pattern.append(np.where(tied, -1, c.argmax))
            h = np.take_along_axis(win, c.argmax[..., None], axis=-1)[..., 0]
        caches.append(c)
    logits = h
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(y)), y].mean())
    cache = Cache(net.version, caches, np.exp(logp), y, pattern)
    return logits, loss, cache


def _weight_grad(w, g_hat, qlayer: QuantizedLayer, ste: str, alpha_grad: str):
    w4 = _as_4d(w)
    rows = filter_rows(w4)
    g_rows = filter_rows(_as_4d(g_hat))
    alphas = qlayer.filter_alphas()[:, None]
    signs = qlayer.sign_rows().astype(np.float64)
    n_k = rows.shape[1]
    if alpha_grad == "full":
        total = g_rows * signs
        per_filter = total.sum(axis=1)
        gid = qlayer.filter_groups()
        per_group = np.bincount(gid, weights=per_filter)
        sizes = np.array([g.n for g in qlayer.groups], dtype=np.float64)
        scale_term = signs * (per_group / sizes)[gid][:, None]
    else:
        n = np.array([qlayer.groups[i].n for i in qlayer.filter_groups()], dtype=np.float64)
        scale_term = g_rows / n[:, None]
    g = scale_term + alphas * _ste(rows, ste) * g_rows
    return rows_to_weight(g, w4.shape).reshape(w.shape)


def _act_grad(x, scale, g_xp, padding, ste, alpha_grad, conv: bool):
    """Gradient through ``x_hat = scale * sign(x)`` (per sample, pads at +scale)."""
    n = x.shape[0]
    g_int = g_xp[:, padding : g_xp.shape[1] - padding, padding : g_xp.shape[2] - padding] if conv and padding else g_xp
    size = x[0].size
    s = scale.reshape((-1,) + (1,) * (x.ndim - 1))
    if alpha_grad == "full":
        signed = g_xp * (_sign(x) if g_xp.shape == x.shape else _pad(_sign(x), padding, 1.0))
        total = signed.reshape(n, -1).sum(axis=1).reshape(s.shape)
        scale_term = _sign(x) * total / size
    else:
        scale_term = g_int / size
    return scale_term + s * _ste(x, ste) * g_int


def backward(net: ToyNet, cache: Cache, loss_grad=None, ste: str = "clipped", alpha_grad: str = "diagonal"):
    """Gradients w.r.t. the shadow parameters, keyed ``(layer_index, name)``.

    Also returns, under ``(layer_index, "weight_hat")``, the gradient with
    respect to the effective (dequantized) weight of every weight layer.
    """
    if cache.version != net.version:
        raise StaleCacheError(f"cache from net version {cache.version}, net is at {net.version}")
    if ste not in STE_MODES or alpha_grad not in ALPHA_MODES:
        raise ValueError(f"bad gradient options ste={ste!r} alpha_grad={alpha_grad!r}")
    if loss_grad is None:
        n = len(cache.labels)
        loss_grad = cache.probs.copy()
        loss_grad[np.arange(n), cache.labels] -= 1.0
        loss_grad /= n
    g = np.asarray(loss_grad, dtype=np.float64)
    grads = {}
    for idx in range(len(net.layers) - 1, -1, -1):
        layer, c = net.layers[idx], cache.layers[idx]
        if isinstance(layer, (Conv, Dense)):
            xnor = layer.quant.active and Mode(layer.quant.mode) is Mode.XNOR
            if isinstance(layer, Conv):
                g_hat, g_in = _conv_backward(c.xp, c.w_eff, layer.stride, g)
            else:
                g_hat = c.xp.T @ g
                g_in = g @ c.w_eff.T
                grads[(idx, "bias")] = g.sum(axis=0)
            grads[(idx, "weight_hat")] = g_hat
            if c.qlayer is not None:
                grads[(idx, "weight")] = _weight_grad(layer.weight, g_hat, c.qlayer, ste, alpha_grad)
            else:
                grads[(idx, "weight")] = g_hat
            p = layer.padding if isinstance(layer, Conv) else 0
            if xnor:
                x_in = c.x.reshape(c.x.shape[0], -1) if isinstance(layer, Dense) else c.x
                g = _act_grad(x_in, c.act_scale, g_in, p, ste, alpha_grad, isinstance(layer, Conv))
            elif p:
                g = g_in[:, p:-p, p:-p]
            else:
                g = g_in
            g = g.reshape(c.x.shape)
        elif isinstance(layer, ReLU):
            g = np.where(c.mask, g, 0.0)
        elif isinstance(layer, Sign):
            g = g * _ste(c.x, ste)
        elif isinstance(layer, MaxPool2):
            n, hh, ww, ch = c.x.shape
            win = np.zeros((n, hh // 2, ww // 2, ch, 4))
            np.put_along_axis(win, c.argmax[..., None], g[..., None], axis=-1)
            g = win.reshape(n, hh // 2, ww // 2, ch, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(c.x.shape)
    return grads


def predict(net: ToyNet, x) -> np.ndarray:
    logits, _, _ = forward(net, x, np.zeros(len(x), dtype=np.int64))
    return logits.argmax(axis=1)


def accuracy(net: ToyNet, x, y) -> float:
    return float((predict(net, x) == np.asarray(y)).mean())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr: float = 1e-3
    decay_factor: float = 1.0
    decay_epochs: tuple[int, ...] = ()
    seed: int = 0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    ste: str = "clipped"
    alpha_grad: str = "diagonal"
    clip_shadow: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.ste not in STE_MODES or self.alpha_grad not in ALPHA_MODES:
            raise ValueError(f"bad gradient options ste={self.ste!r} alpha_grad={self.alpha_grad!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (0-based)."""
        k = sum(1 for e in self.decay_epochs if e <= epoch)
        return self.lr * self.decay_factor**k


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    eval_accuracy: float
    step_losses: list = field(default_factory=list, repr=False)


class _Adam:
    def __init__(self, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads, lr):
        self.t += 1
        for key, p in params.items():
            g = grads[key]
            m = self.m.get(key, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(key, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[key], self.v[key] = m, v
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


class _SGD:
    def step(self, params, grads, lr):
        for key, p in params.items():
            p -= lr * grads[key]


def _param_table(net: ToyNet):
    table = {}
    for idx, layer in net.weight_layers():
        for name, arr in layer.params().items():
            table[(idx, name)] = arr
    return table


def train_step(net: ToyNet, x, y, cfg: TrainConfig, opt, lr: float) -> float:
    _, loss, cache = forward(net, x, y)
    if not math.isfinite(loss):
        return loss
    grads = backward(net, cache, ste=cfg.ste, alpha_grad=cfg.alpha_grad)
    params = _param_table(net)
    if cfg.weight_decay:
        for key, p in params.items():
            if key[1] == "weight":
                grads[key] = grads[key] + cfg.weight_decay * p
    opt.step(params, grads, lr)
    if cfg.clip_shadow:
        for idx, layer in net.weight_layers():
            if layer.quant.active:
                np.clip(layer.weight, -1.0, 1.0, out=layer.weight)
    net.version += 1
    return loss


def train(net: ToyNet, data: Dataset, cfg: TrainConfig, callback=None):
    """Train ``net`` in place; returns ``(net, [EpochMetrics, ...])``."""
    if tuple(data.x_train.shape[1:]) != net.input_shape:
        raise ShapeError("training images", net.input_shape, data.x_train.shape[1:])
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    opt = _Adam() if cfg.optimizer == "adam" else _SGD()
    history = []
    step = 0
    n = len(data.y_train)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            loss = train_step(net, data.x_train[sel], data.y_train[sel], cfg, opt, lr)
            if not math.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            losses.append(loss)
            step += 1
        m = EpochMetrics(epoch, lr, float(np.mean(losses)), accuracy(net, data.x_eval, data.y_eval), losses)
        history.append(m)
        if callback is not None:
            callback(m)
    return net, history


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    analytic: np.ndarray
    numeric: np.ndarray
    names: list
    skipped: list
    max_abs_deviation: float
    max_rel_deviation: float
    hat_max_rel_deviation: float

    @property
    def n_checked(self) -> int:
        return int(self.analytic.size)


def _rel(a, b, floor):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    net: ToyNet,
    x,
    y,
    epsilon: float = 1e-5,
    margin: float = 1e-3,
    max_per_tensor: int | None = None,
    seed: int = 0,
    rel_floor: float = 1e-6,
    include=("weight", "bias"),
) -> GradReport:
    """Central differences of the (quantized) loss against the analytic gradient.

    The analytic side is the locally exact derivative (``ste="none",
    alpha_grad="full"``): away from sign flips the quantized loss is smooth
    and only its scale path moves. The gradient with respect to each
    dequantized weight -- the factor the STE formula multiplies -- is checked
    separately by perturbing the effective weights directly.

    Quantized weights within ``margin`` of 0 or of |w| = 1, and any
    perturbation that changes a sign, ReLU or pooling pattern, are skipped.
    ``include`` selects the parameter kinds checked.
    """
    if epsilon <= 0 or margin <= 0:
        raise ValueError("epsilon and margin must be positive")
    rng = np.random.Generator(np.random.Philox(key=seed))
    _, _, base = forward(net, x, y)
    grads = backward(net, base, ste="none", alpha_grad="full")
    analytic, numeric, names, skipped = [], [], [], []
    hat_a, hat_n = [], []
    for idx, layer in net.weight_layers():
        for name, arr in layer.params().items():
            if name not in include:
                continue
            flat = arr.reshape(-1)
            picks = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                picks = np.sort(rng.choice(flat.size, max_per_tensor, replace=False))
            quantized = layer.quant.active and name == "weight"
            for i in picks:
                w0 = flat[i]
                if quantized and (abs(w0) < margin or abs(abs(w0) - 1.0) < margin):
                    skipped.append(((idx, name, int(i)), "near STE kink"))
                    continue
                flat[i] = w0 + epsilon
                _, lp, cp = forward(net, x, y)
                flat[i] = w0 - epsilon
                _, lm, cm = forward(net, x, y)
                flat[i] = w0
                if not (cp.same_pattern(base) and cm.same_pattern(base)):
                    skipped.append(((idx, name, int(i)), "perturbation crosses a kink"))
                    continue
                analytic.append(grads[(idx, name)].reshape(-1)[i])
                numeric.append((lp - lm) / (2 * epsilon))
                names.append((idx, name, int(i)))
            if quantized:
                w_hat = base.layers[idx].w_eff.copy()
                flat_hat = w_hat.reshape(-1)
                g_hat = grads[(idx, "weight_hat")].reshape(-1)
                for i in picks:
                    v0 = flat_hat[i]
                    flat_hat[i] = v0 + epsilon
                    _, lp, cp = forward(net, x, y, {idx: w_hat})
                    flat_hat[i] = v0 - epsilon
                    _, lm, cm = forward(net, x, y, {idx: w_hat})
                    flat_hat[i] = v0
                    if not (cp.same_pattern(base) and cm.same_pattern(base)):
                        continue
                    hat_a.append(g_hat[i])
                    hat_n.append((lp - lm) / (2 * epsilon))
    if not analytic:
        raise GradCheckError(
            "every parameter was excluded; use a larger net or a smaller epsilon/margin"
        )
    a, f = np.array(analytic), np.array(numeric)
    hat_dev = float(_rel(np.array(hat_a), np.array(hat_n), rel_floor).max()) if hat_a else 0.0
    return GradReport(
        analytic=a,
        numeric=f,
        names=names,
        skipped=skipped,
        max_abs_deviation=float(np.abs(a - f).max()),
        max_rel_deviation=float(_rel(a, f, rel_floor).max()),
        hat_max_rel_deviation=hat_dev,
    )
