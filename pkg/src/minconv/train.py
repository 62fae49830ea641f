"""Training loop, evaluation, checkpoints and exact-to-approximate transfer.

Each step runs the layers' approximate forward (running-mean update, input
and weight clipping, rescaling, smin accumulation), back-propagates the
exact convolution gradients through the clip masks, applies the optimizer
and then the learning-rate schedule.
"""
import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from minconv.approx import DEFAULT_GAMMA, INFER, TRAIN
from minconv.data import Dataset, batches
from minconv.errors import DegenerateInputError, DivergenceError, FormatError, IncompatibleCheckpointError, LengthError
from minconv.nn import Network, NetworkSpec, softmax_cross_entropy

log = logging.getLogger(__name__)

MAGIC = b"MINCONV1"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 1
    optimizer: str = "sgd"  # sgd | adam
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # epochs (as fractions of the total) at which lr is multiplied by lr_decay
    lr_milestones: tuple = (0.5, 0.75)
    lr_decay: float = 0.1
    gamma: float = DEFAULT_GAMMA
    seed: int = 0
    init: str = "random"  # random | path to a checkpoint

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch):
        """Learning rate for a 0-based epoch under the step-decay schedule."""
        lr = self.lr
        for m in self.lr_milestones:
            if epoch >= int(round(m * self.epochs)) and m * self.epochs >= 1:
                lr *= self.lr_decay
        return lr


class SGD:
    def __init__(self, params, momentum=0.9):
        self.momentum = momentum
        self.state = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr):
        lr = params[0].dtype.type(lr) if params else lr
        mom = params[0].dtype.type(self.momentum) if params else self.momentum
        for p, g, v in zip(params, grads, self.state):
            v *= mom
            v -= np.multiply(g, lr, dtype=v.dtype)
            p += v


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.state = [np.zeros_like(p) for p in params] + [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr):
        self.t += 1
        n = len(params)
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.state[:n], self.state[n:]):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.momentum)
    return Adam(params, cfg.beta1, cfg.beta2, cfg.eps)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    top1: float
    lr: float


def layer_stats_report(net: Network):
    parts = []
    for i, c in enumerate(net.conv_layers):
        parts.append(
            f"conv{i}[{c.mode}]: mu_x_running={c.stats.mu_x_running:.6g} "
            f"mu_w=[{np.min(c.stats.mu_w):.4g}, {np.max(c.stats.mu_w):.4g}]"
        )
    return "; ".join(parts)


class Trainer:
    """Owns a network, its optimizer state and the epoch counter."""

    def __init__(self, net: Network, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        net.set_gamma(cfg.gamma)
        self.params = [p for _, p in net.parameters()]
        self.optimizer = make_optimizer(cfg, self.params)
        self.epoch = 0

    @property
    def lr(self):
        return self.cfg.lr_at(self.epoch)

    def train_step(self, x, y, lr):
        logits = self.net.forward(x, TRAIN)
        loss, grad = softmax_cross_entropy(logits, y)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at epoch {self.epoch}; {layer_stats_report(self.net)}")
        grads = self.net.backward(grad)
        self.optimizer.step(self.params, grads, lr)
        correct = int((logits.argmax(axis=1) == y).sum())
        return loss, correct

    def train_epoch(self, data: Dataset, max_batches=None):
        lr = self.lr
        total_loss = 0.0
        correct = seen = 0
        for b, (x, y) in enumerate(batches(data, self.cfg.batch_size, self.cfg.seed, True, self.epoch)):
            if max_batches is not None and b >= max_batches:
                break
            loss, c = self.train_step(x, y, lr)
            total_loss += loss * len(y)
            correct += c
            seen += len(y)
        m = EpochMetrics(self.epoch + 1, total_loss / seen, correct / seen, lr)
        self.epoch += 1
        return m


def train_epoch(trainer: Trainer, data: Dataset):
    """One pass over ``data``; returns :class:`EpochMetrics`."""
    return trainer.train_epoch(data)


def evaluate(net: Network, data: Dataset, batch_size=256, return_loss=False):
    """Top-1 accuracy in the infer phase (frozen running statistics)."""
    if len(data) == 0:
        raise DegenerateInputError("cannot evaluate on an empty dataset")
    correct = 0
    total_loss = 0.0
    for x, y in batches(data, batch_size, shuffle=False):
        logits = net.forward(x, INFER)
        correct += int((logits.argmax(axis=1) == y).sum())
        if return_loss:
            total_loss += softmax_cross_entropy(logits, y)[0] * len(y)
    acc = correct / len(data)
    return (acc, total_loss / len(data)) if return_loss else acc


def calibrate(net: Network, data: Dataset, batch_size=64, seed=0, max_batches=None):
    """Re-estimate every conv layer's running ``mu_x`` as the average batch
    statistic over one pass of ``data`` (parameters untouched)."""
    sums = np.zeros(len(net.conv_layers))
    count = 0
    saved = [c.stats.gamma for c in net.conv_layers]
    for c in net.conv_layers:
        c.stats.gamma = 0.0  # running value then equals the batch value
    try:
        for b, (x, _) in enumerate(batches(data, batch_size, seed, True, 0)):
            if max_batches is not None and b >= max_batches:
                break
            net.forward(x, TRAIN)
            sums += [c.stats.mu_x_running for c in net.conv_layers]
            count += 1
    finally:
        for c, g in zip(net.conv_layers, saved):
            c.stats.gamma = g
    if count == 0:
        raise DegenerateInputError("calibration saw no batches")
    for c, s in zip(net.conv_layers, sums):
        c.stats.mu_x_running = float(s / count)
    return [c.stats.mu_x_running for c in net.conv_layers]


# --- checkpoints -----------------------------------------------------------


def _tensor_bytes(a):
    a = np.ascontiguousarray(a, dtype="<f4")
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def save_checkpoint(path, net: Network, epoch=0, trainer: Trainer = None, extra=None):
    """Write ``MINCONV1`` + length-prefixed JSON metadata + float32 tensors."""
    names, tensors = [], []
    for name, p in net.parameters():
        names.append(name)
        tensors.append(p)
    for i, c in enumerate(net.conv_layers):
        names.append(f"conv{i}.mu_w")
        tensors.append(c.stats.mu_w)
    opt_meta = None
    if trainer is not None:
        opt = trainer.optimizer
        opt_meta = {"kind": trainer.cfg.optimizer, "t": getattr(opt, "t", 0), "count": len(opt.state)}
        for j, s in enumerate(opt.state):
            names.append(f"opt.{j}")
            tensors.append(s)
    meta = {
        "version": FORMAT_VERSION,
        "digest": net.spec.digest(),
        "spec": net.spec.to_dict(),
        "modes": net.modes,
        "epoch": epoch,
        "mu_x_running": [float(c.stats.mu_x_running) for c in net.conv_layers],
        "gamma": [float(c.stats.gamma) for c in net.conv_layers],
        "tensors": names,
        "optimizer": opt_meta,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for t in tensors:
        buf.write(_tensor_bytes(t))
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path):
    """Return ``(meta, {name: float32 array})``."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a MINCONV1 checkpoint")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise LengthError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + n:
        raise LengthError(f"{path}: truncated metadata")
    meta = json.loads(raw[pos : pos + n].decode("utf-8"))
    pos += n
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    tensors = {}
    for name in meta["tensors"]:
        if len(raw) < pos + 4:
            raise LengthError(f"{path}: truncated tensor {name}")
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count = int(np.prod(shape))
        if len(raw) < pos + 4 * count:
            raise LengthError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return meta, tensors


def load_checkpoint(path, net: Network, trainer: Trainer = None):
    """Copy parameters and statistics into ``net``; conv modes may differ.

    Returns the checkpoint metadata.
    """
    meta, tensors = read_checkpoint(path)
    if meta["digest"] != net.spec.digest():
        raise IncompatibleCheckpointError(
            f"checkpoint architecture {meta['spec']['name']} ({meta['digest'][:12]}) "
            f"does not match network {net.spec.name} ({net.spec.digest()[:12]})"
        )
    for name, p in net.parameters():
        p[...] = tensors[name]
    for i, c in enumerate(net.conv_layers):
        c.stats.mu_w = tensors[f"conv{i}.mu_w"].astype(c.weights.dtype)
        c.stats.mu_x_running = float(meta["mu_x_running"][i])
        c.stats.gamma = float(meta["gamma"][i])
    if trainer is not None and meta.get("optimizer"):
        opt = meta["optimizer"]
        if opt["kind"] == trainer.cfg.optimizer and opt["count"] == len(trainer.optimizer.state):
            for j, s in enumerate(trainer.optimizer.state):
                s[...] = tensors[f"opt.{j}"]
            if hasattr(trainer.optimizer, "t"):
                trainer.optimizer.t = opt["t"]
        trainer.epoch = meta["epoch"]
    return meta


def transfer_init(approx_net: Network, checkpoint, calib_data: Dataset = None, batch_size=64, seed=0, max_batches=None):
    """Warm-start ``approx_net`` from a checkpoint of the same architecture.

    Parameters are copied; when ``calib_data`` is given the running input
    statistics are re-estimated by one calibration pass.
    """
    load_checkpoint(checkpoint, approx_net)
    if calib_data is not None:
        calibrate(approx_net, calib_data, batch_size, seed, max_batches)
    return approx_net


# --- metrics log -----------------------------------------------------------

METRICS_HEADER = ["epoch", "split", "loss", "top1"]


def write_metrics(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["epoch"], r["split"], f"{r['loss']:.9g}", f"{r['top1']:.9g}"])


def read_metrics(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_HEADER:
            raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            {"epoch": int(r["epoch"]), "split": r["split"], "loss": float(r["loss"]), "top1": float(r["top1"])}
            for r in reader
        ]


def fit(net: Network, train: Dataset, test: Dataset, cfg: TrainConfig, out_dir=None, on_epoch=None, ckpt_name="model.ckpt"):
    """Train for ``cfg.epochs``; writes a checkpoint and the metrics CSV
    after every epoch when ``out_dir`` is given. Returns the metric rows."""
    trainer = Trainer(net, cfg)
    rows = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for _ in range(cfg.epochs):
        m = trainer.train_epoch(train)
        rows.append({"epoch": m.epoch, "split": "train", "loss": m.loss, "top1": m.top1})
        if test is not None:
            acc, loss = evaluate(net, test, return_loss=True)
            rows.append({"epoch": m.epoch, "split": "test", "loss": loss, "top1": acc})
        log.info("epoch %d lr=%g train_loss=%.4f train_top1=%.4f test_top1=%s", m.epoch, m.lr, m.loss, m.top1,
                 f"{rows[-1]['top1']:.4f}" if test is not None else "-")
        if out:
            save_checkpoint(out / ckpt_name, net, epoch=m.epoch, trainer=trainer, extra={"config": _cfg_dict(cfg)})
            write_metrics(out / "metrics.csv", rows)
        if on_epoch:
            on_epoch(m, rows)
    return rows


def _cfg_dict(cfg):
    d = asdict(cfg)
    d["lr_milestones"] = list(d["lr_milestones"])
    return d
