"""Layers, network specs and the two reference architectures.

Every convolution is an :class:`~minconv.approx.ApproxConvLayer`, so a
network switches between exact and min-approximate convolutions by
flipping per-layer mode flags without touching anything else.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from minconv.approx import EXACT, INFER, MIN_APPROX, PHASES, TRAIN, ApproxConvLayer, normalize_mode
from minconv.errors import DimensionError
from minconv.tensor import Shape2D

LEAKY_SLOPE = 0.1
NUM_CLASSES = 10


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | maxpool | leaky_relu | relu | fc | dropout
    out: int = 0
    fh: int = 0
    fw: int = 0
    mode: str = EXACT
    slope: float = LEAKY_SLOPE
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("conv", "maxpool", "leaky_relu", "relu", "fc", "dropout"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            object.__setattr__(self, "mode", normalize_mode(self.mode))
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


def conv(out, k, mode=EXACT):
    return LayerSpec("conv", out=out, fh=k, fw=k, mode=mode)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple  # (C, H, W)
    layers: tuple = field(default_factory=tuple)

    @property
    def conv_modes(self):
        return [l.mode for l in self.layers if l.kind == "conv"]

    @property
    def num_convs(self):
        return sum(l.kind == "conv" for l in self.layers)

    def with_modes(self, modes):
        modes = expand_modes(modes, self.num_convs)
        it = iter(modes)
        layers = tuple(replace(l, mode=next(it)) if l.kind == "conv" else l for l in self.layers)
        return replace(self, layers=layers)

    def shapes(self):
        """Output shape of every layer for one input image."""
        shape = tuple(self.input_shape)
        out = []
        for l in self.layers:
            if l.kind == "conv":
                c, h, w = shape
                oh, ow = Shape2D.same(l.fh, l.fw).output_size(h, w)
                shape = (l.out, oh, ow)
            elif l.kind == "maxpool":
                c, h, w = shape
                if h % 2 or w % 2:
                    raise DimensionError(f"2x2 max-pool needs even extents, got {h}x{w}")
                shape = (c, h // 2, w // 2)
            elif l.kind == "fc":
                shape = (l.out,)
            out.append(shape)
        return out

    def validate(self):
        shapes = self.shapes()
        if shapes[-1] != (NUM_CLASSES,):
            raise DimensionError(f"network must end in {NUM_CLASSES} logits, got {shapes[-1]}")
        return self

    def to_dict(self):
        return {"name": self.name, "input_shape": list(self.input_shape), "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(d["input_shape"]), tuple(LayerSpec(**l) for l in d["layers"]))

    def to_config(self):
        """Human-readable ``key=value`` rendering, one layer per line."""
        lines = [f"name={self.name}", "input_shape=" + "x".join(map(str, self.input_shape))]
        for i, l in enumerate(self.layers):
            if l.kind == "conv":
                desc = f"conv {l.fh}x{l.fw}x{l.out} mode={l.mode}"
            elif l.kind == "fc":
                desc = f"fc {l.out}"
            elif l.kind == "dropout":
                desc = f"dropout {l.rate}"
            elif l.kind == "leaky_relu":
                desc = f"leaky_relu {l.slope}"
            else:
                desc = l.kind
            lines.append(f"layer{i}={desc}")
        return "\n".join(lines) + "\n"

    def digest(self):
        """Architecture hash that ignores conv mode flags."""
        d = self.with_modes([EXACT] * self.num_convs).to_dict()
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def expand_modes(modes, n):
    """Normalise a mode argument to a list of ``n`` conv modes.

    Accepts a single mode, a sequence, or a comma-separated string with the
    shorthands ``all-exact`` / ``all-approx``.
    """
    if isinstance(modes, str):
        if modes == "all-exact":
            modes = [EXACT] * n
        elif modes == "all-approx":
            modes = [MIN_APPROX] * n
        else:
            modes = [m.strip() for m in modes.split(",")]
            if len(modes) == 1:
                modes = modes * n
    modes = [normalize_mode(m) for m in modes]
    if len(modes) != n:
        raise ValueError(f"expected {n} conv modes, got {len(modes)}")
    return modes


def build_lenet(modes=EXACT, input_shape=(1, 28, 28)):
    """LeNet: two 5x5 convs (32, 64 filters) with one 2x2 pool, FC 1024, dropout, FC 10."""
    m = expand_modes(modes, 2)
    layers = (
        conv(32, 5, m[0]),
        LayerSpec("leaky_relu"),
        LayerSpec("maxpool"),
        conv(64, 5, m[1]),
        LayerSpec("leaky_relu"),
        LayerSpec("fc", out=1024),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("fc", out=NUM_CLASSES),
    )
    return NetworkSpec("lenet", tuple(input_shape), layers).validate()


def build_mini_cifar(modes=EXACT, input_shape=(3, 32, 32)):
    """mini_cifar: six convs (three of them 1x1) in two pooled stages, FC 1024, dropout, FC 10."""
    m = expand_modes(modes, 6)
    lr = LayerSpec("leaky_relu")
    layers = (
        conv(32, 3, m[0]), lr,
        LayerSpec("maxpool"),
        conv(16, 1, m[1]), lr,
        conv(64, 3, m[2]), lr,
        LayerSpec("maxpool"),
        conv(32, 1, m[3]), lr,
        conv(128, 3, m[4]), lr,
        conv(64, 1, m[5]), lr,
        LayerSpec("fc", out=1024),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("fc", out=NUM_CLASSES),
    )
    return NetworkSpec("mini_cifar", tuple(input_shape), layers).validate()


BUILDERS = {"lenet": build_lenet, "mini-cifar": build_mini_cifar, "mini_cifar": build_mini_cifar}


def uniform_fan_in(rng, shape, fan_in, dtype):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class LeakyReLU:
    def __init__(self, slope=LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x, phase):
        self._pos = x > 0
        return np.where(self._pos, x, x * x.dtype.type(self.slope))

    def backward(self, g):
        return np.where(self._pos, g, g * g.dtype.type(self.slope))


class ReLU:
    def forward(self, x, phase):
        self._pos = x > 0
        return np.where(self._pos, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._pos, g, 0).astype(g.dtype, copy=False)


class MaxPool2:
    """2x2 max-pool, stride 2; ties go to the first position in row-major order."""

    def forward(self, x, phase):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"2x2 max-pool needs even extents, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self._arg = win.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        n, c, h, w = self._shape
        win = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(win, self._arg[..., None], g[..., None], axis=-1)
        return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class Dropout:
    """Inverted dropout; identity in the infer phase."""

    def __init__(self, rate, rng):
        self.rate = rate
        self.rng = rng

    def forward(self, x, phase):
        if phase != TRAIN or self.rate == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.rate)
        return x * self._mask

    def backward(self, g):
        return g if self._mask is None else g * self._mask


class Dense:
    """Fully connected layer; flattens its input."""

    def __init__(self, weights, bias):
        self.weights = weights
        self.bias = bias

    def forward(self, x, phase):
        self._in_shape = x.shape
        self._x = x.reshape(x.shape[0], -1)
        return self._x @ self.weights + self.bias

    def backward(self, g):
        self.grad_w = self._x.T @ g
        self.grad_b = g.sum(axis=0)
        return (g @ self.weights.T).reshape(self._in_shape)


class ConvBlock:
    """Adapter giving :class:`ApproxConvLayer` the common layer interface."""

    def __init__(self, layer: ApproxConvLayer):
        self.layer = layer

    def forward(self, x, phase):
        return self.layer.forward(x, phase)

    def backward(self, g, need_grad_x=True):
        gx, self.grad_w, self.grad_b = self.layer.backward(g, need_grad_x)
        return gx


class Network:
    """Executable network built from a :class:`NetworkSpec`.

    Parameters are initialised from ``seed``; the same generator, advanced
    afterwards, drives dropout masks.
    """

    def __init__(self, spec: NetworkSpec, seed=0, dtype=np.float32, gamma=None):
        self.spec = spec.validate()
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.layers = []
        shape = tuple(spec.input_shape)
        for l, out_shape in zip(spec.layers, spec.shapes()):
            if l.kind == "conv":
                fan_in = shape[0] * l.fh * l.fw
                w = uniform_fan_in(self.rng, (l.out, shape[0], l.fh, l.fw), fan_in, self.dtype)
                layer = ApproxConvLayer(w, Shape2D.same(l.fh, l.fw), mode=l.mode)
                if gamma is not None:
                    layer.stats.gamma = gamma
                self.layers.append(ConvBlock(layer))
            elif l.kind == "fc":
                fan_in = int(np.prod(shape))
                w = uniform_fan_in(self.rng, (fan_in, l.out), fan_in, self.dtype)
                self.layers.append(Dense(w, np.zeros(l.out, dtype=self.dtype)))
            elif l.kind == "maxpool":
                self.layers.append(MaxPool2())
            elif l.kind == "leaky_relu":
                self.layers.append(LeakyReLU(l.slope))
            elif l.kind == "relu":
                self.layers.append(ReLU())
            elif l.kind == "dropout":
                self.layers.append(Dropout(l.rate, self.rng))
            shape = out_shape

    @property
    def conv_layers(self):
        return [b.layer for b in self.layers if isinstance(b, ConvBlock)]

    @property
    def modes(self):
        return [c.mode for c in self.conv_layers]

    def set_modes(self, modes):
        modes = expand_modes(modes, len(self.conv_layers))
        for c, m in zip(self.conv_layers, modes):
            c.mode = m
        self.spec = self.spec.with_modes(modes)

    def set_gamma(self, gamma):
        for c in self.conv_layers:
            c.stats.gamma = gamma

    def parameters(self):
        """``(name, array)`` pairs in declaration order; arrays are live."""
        out = []
        ci = fi = 0
        for b in self.layers:
            if isinstance(b, ConvBlock):
                out += [(f"conv{ci}.weight", b.layer.weights), (f"conv{ci}.bias", b.layer.bias)]
                ci += 1
            elif isinstance(b, Dense):
                out += [(f"fc{fi}.weight", b.weights), (f"fc{fi}.bias", b.bias)]
                fi += 1
        return out

    def gradients(self):
        out = []
        for b in self.layers:
            if isinstance(b, (ConvBlock, Dense)):
                out += [b.grad_w, b.grad_b]
        return out

    def forward(self, x, phase=INFER):
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise DimensionError(f"input {x.shape[1:]} does not match network input {self.spec.input_shape}")
        for b in self.layers:
            x = b.forward(x, phase)
        return x

    def backward(self, grad_logits):
        g = grad_logits.astype(self.dtype, copy=False)
        for i in range(len(self.layers) - 1, -1, -1):
            b = self.layers[i]
            if i == 0 and isinstance(b, ConvBlock):
                b.backward(g, need_grad_x=False)  # nothing upstream of the input
            else:
                g = b.backward(g)
        return self.gradients()

    def predict(self, x, batch_size=256):
        out = [self.forward(x[i : i + batch_size], INFER) for i in range(0, len(x), batch_size)]
        return np.concatenate(out).argmax(axis=1)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean(dtype=np.float64))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, grad / logits.dtype.type(n)
