"""SGD with momentum, the epoch-indexed learning-rate/weight-decay schedule,
the training loop, evaluation and checkpointing."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .data import LabeledImageSet, augment_batch
from .layers import Network, NetworkSpec, softmax_cross_entropy

log = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_loss", "test_error", "lr", "weight_decay")

# (first epoch, last epoch, learning rate, weight decay) for a 220-epoch run
TABLE2 = (
    (1, 59, 0.1, 0.0005),
    (60, 119, 0.02, 0.0005),
    (120, 159, 0.004, 0.0005),
    (160, 199, 0.0008, 0.0005),
    (200, 220, 0.0008, 0.0),
)


class NonFiniteError(FloatingPointError):
    pass


def table2_schedule(epochs: int = 220) -> tuple[tuple[int, int, float, float], ...]:
    """The 220-epoch schedule with its boundaries scaled to ``epochs``.

    Rows that shrink to nothing are dropped, except the first, which keeps at
    least one epoch.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rows, start = [], 1
    for k, (_, end, lr, wd) in enumerate(TABLE2):
        stop = epochs if end == TABLE2[-1][1] else round(end * epochs / TABLE2[-1][1])
        if k == 0:
            stop = max(stop, 1)  # always start at the initial learning rate
        if stop >= start:
            rows.append((start, stop, lr, wd))
            start = stop + 1
    return tuple(rows)


def validate_schedule(schedule, epochs: int) -> None:
    expect = 1
    for start, end, lr, wd in schedule:
        if start != expect or end < start:
            raise ValueError(f"schedule row ({start}, {end}) breaks contiguity at epoch {expect}")
        if lr < 0 or wd < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        expect = end + 1
    if expect != epochs + 1:
        raise ValueError(f"schedule covers epochs 1..{expect - 1}, need 1..{epochs}")


def schedule_lookup(epoch: int, schedule=TABLE2) -> tuple[float, float]:
    for start, end, lr, wd in schedule:
        if start <= epoch <= end:
            return lr, wd
    raise ValueError(f"epoch {epoch} is outside the schedule")


@dataclass
class TrainConfig:
    batch_size: int = 128
    momentum: float = 0.9
    epochs: int = 220
    dropout: float = 0.3
    schedule: tuple = field(default=None)
    seed: int = 0
    deterministic: bool = True
    nesterov: bool = False
    augment: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = table2_schedule(self.epochs)
        self.schedule = tuple(tuple(r) for r in self.schedule)
        validate_schedule(self.schedule, self.epochs)
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for batch normalization")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = [list(r) for r in self.schedule]
        return d


def sgd_step(params, grads, momentum_buf, lr: float, weight_decay: float, momentum: float,
             decay=None, nesterov: bool = False):
    """In-place SGD-with-momentum update over dicts of arrays.

    ``v <- momentum*v + (g + wd*p)`` then ``p <- p - lr*v`` (or, with
    ``nesterov``, ``p <- p - lr*(g + wd*p + momentum*v)``). ``decay`` maps
    names to whether weight decay applies; missing names decay.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    for name, p in params.items():
        g = grads[name]
        if weight_decay and (decay is None or decay.get(name, True)):
            g = g + weight_decay * p
        v = momentum_buf.get(name)
        if v is None:
            v = momentum_buf[name] = np.zeros_like(p)
        v *= momentum
        v += g
        if nesterov:
            p -= lr * (g + momentum * v)
        else:
            p -= lr * v
    return params


class Optimizer:
    """Momentum buffers plus the decay mask for one network."""

    def __init__(self, network: Network, momentum: float = 0.9, nesterov: bool = False):
        self.network = network
        self.momentum = momentum
        self.nesterov = nesterov
        self.names = [name for name, _, _ in network.parameters()]
        self.decay = {name: network.decays(name) for name in self.names}
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, lr: float, weight_decay: float) -> None:
        params, grads = {}, {}
        for name, layer, key in self.network.parameters():
            params[name] = layer.params[key]
            grads[name] = layer.grads[key]
        sgd_step(params, grads, self.buffers, lr, weight_decay, self.momentum, self.decay, self.nesterov)


def train_step(network: Network, opt: Optimizer, x, y, lr: float, weight_decay: float) -> float:
    logits = network.forward(x, train=True)
    loss, dlogits = softmax_cross_entropy(logits, y)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    network.backward(dlogits)
    opt.step(lr, weight_decay)
    return loss


def evaluate(model, data: LabeledImageSet, batch_size: int = 500) -> float:
    """Top-1 error rate of ``model.forward(x, train=False)`` on ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    wrong = 0
    for start in range(0, len(data), batch_size):
        logits = model.forward(data.images[start : start + batch_size], train=False)
        wrong += int((np.argmax(logits, axis=1) != data.labels[start : start + batch_size]).sum())
    return wrong / len(data)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_HEADER[1:]])
    return buf.getvalue()


def make_checkpoint(network: Network, opt: Optimizer, epoch: int, rng, config: TrainConfig,
                    history: list[dict], extra: dict | None = None) -> tuple[dict, dict]:
    meta = {
        "spec": dataclasses.asdict(network.spec),
        "dtype": network.dtype.str,
        "config": config.to_dict(),
        "epoch": epoch,
        "rng_state": rng.bit_generator.state,
        "history": history,
        "extra": extra or {},
    }
    tensors = {f"net/{k}": v for k, v in network.named_arrays().items()}
    for name in opt.names:
        if name in opt.buffers:
            tensors[f"mom/{name}"] = opt.buffers[name]
    return meta, tensors


def save_checkpoint(path, network, opt, epoch, rng, config, history, extra=None) -> None:
    meta, tensors = make_checkpoint(network, opt, epoch, rng, config, history, extra)
    checkpoint.save(path, meta, tensors)


def restore_network(meta: dict, tensors: dict) -> Network:
    spec = NetworkSpec(**meta["spec"])
    net = Network(spec, seed=0, dtype=np.dtype(meta.get("dtype", "<f8")))
    arrays = net.named_arrays()
    for name, arr in arrays.items():
        src = tensors.get(f"net/{name}")
        if src is None or src.shape != arr.shape:
            raise checkpoint.CheckpointError(f"checkpoint lacks a matching tensor for {name}")
        arr[...] = src
    return net


def load_network(path) -> tuple[Network, dict]:
    meta, tensors = checkpoint.load(path)
    return restore_network(meta, tensors), meta


def train(network: Network, train_set: LabeledImageSet, test_set: LabeledImageSet | None,
          config: TrainConfig, out_dir=None, resume=None, on_step=None, extra_meta=None) -> list[dict]:
    """Run the training loop and return the per-epoch history.

    ``resume`` is a ``(meta, tensors)`` pair from a checkpoint of this run;
    training continues after its epoch with restored parameters, momentum
    buffers and RNG state. With ``out_dir`` the history is written to
    ``history.csv`` and checkpoints to ``checkpoint_XXXX.volt`` every
    ``config.checkpoint_every`` epochs (and ``last.volt`` at the end).
    """
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(network, config.momentum, config.nesterov)
    history: list[dict] = []
    first_epoch = 1
    if resume is not None:
        meta, tensors = resume
        arrays = network.named_arrays()
        for name, arr in arrays.items():
            arr[...] = tensors[f"net/{name}"]
        for name in opt.names:
            if f"mom/{name}" in tensors:
                opt.buffers[name] = tensors[f"mom/{name}"].copy()
        rng.bit_generator.state = meta["rng_state"]
        history = [dict(r) for r in meta["history"]]
        first_epoch = meta["epoch"] + 1
    network.set_rng(rng)

    def ckpt(path, epoch):
        save_checkpoint(path, network, opt, epoch, rng, config, history, extra_meta)

    n = len(train_set)
    for epoch in range(first_epoch, config.epochs + 1):
        lr, wd = schedule_lookup(epoch, config.schedule)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue
            x = train_set.images[idx]
            if config.augment:
                x = augment_batch(x, rng)
            try:
                loss = train_step(network, opt, x, train_set.labels[idx], lr, wd)
            except NonFiniteError:
                if out_dir is not None:
                    ckpt(os.path.join(out_dir, "postmortem.volt"), epoch - 1)
                raise
            if on_step is not None:
                on_step(epoch, loss)
            total += loss * idx.size
            seen += idx.size
        row = {
            "epoch": epoch,
            "train_loss": total / max(seen, 1),
            "test_error": evaluate(network, test_set) if test_set is not None and len(test_set) else float("nan"),
            "lr": lr,
            "weight_decay": wd,
        }
        history.append(row)
        log.info("epoch %d loss %.4f test error %.4f", epoch, row["train_loss"], row["test_error"])
        if out_dir is not None:
            with open(os.path.join(out_dir, "history.csv"), "w", newline="") as fh:
                fh.write(history_csv(history))
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                ckpt(os.path.join(out_dir, f"checkpoint_{epoch:04d}.volt"), epoch)
    if out_dir is not None:
        ckpt(os.path.join(out_dir, "last.volt"), config.epochs)
    return history
