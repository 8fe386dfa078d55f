"""Binary cross-entropy objective, Adam optimization, checkpoint selection on
validation mean AUC, and mean-score ensembling of the best checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .metrics import evaluate
from .network import Network, NetworkConfig, build, load_archive, save_archive
from .tensor import Tensor, TensorError, _make


class TrainingAborted(RuntimeError):
    """Raised when the loss turns non-finite; carries the offending step."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay_factor: float = 0.97
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_epochs: int = 50
    patience_epochs: int = 1
    seed: int = 0
    ensemble_size: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must be in [0, 1)")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over batch x classes, fused with the sigmoid.

    Stable form: loss = max(z,0) - z*y + log(1 + exp(-|z|)); the gradient is
    exactly (sigmoid(z) - y) / count."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise TensorError(f"target shape {y.shape} != logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise TensorError("targets must be binary 0/1")
    z = logits.data
    per_elem = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    count = z.size
    out = None

    def backward():
        if logits.requires_grad:
            probs = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.maximum(z, 0))),
                             np.exp(np.minimum(z, 0))
                             / (1.0 + np.exp(np.minimum(z, 0))))
            logits._accumulate(out.grad * (probs - y) / count)

    out = _make(np.array(per_elem.mean()).reshape(()), (logits,), backward,
                "bce_with_logits")
    return out


def bce_loss(probabilities: Tensor, targets: np.ndarray) -> float:
    """Mean BCE evaluated on probabilities directly (non-fused form)."""
    y = np.asarray(targets, dtype=np.float64)
    p = probabilities.data
    if np.any((p <= 0) | (p >= 1)):
        raise TensorError("probabilities must lie strictly in (0, 1)")
    if not np.all((y == 0) | (y == 1)):
        raise TensorError("targets must be binary 0/1")
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


class OptimizerState:
    """Per-parameter Adam moments, keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        items = [(f"opt/m/{k}", a) for k, a in sorted(self.m.items())]
        items += [(f"opt/v/{k}", a) for k, a in sorted(self.v.items())]
        return items

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], t: int) -> "OptimizerState":
        st = cls()
        st.t = t
        for name, arr in arrays.items():
            if name.startswith("opt/m/"):
                st.m[name[len("opt/m/"):]] = arr.copy()
            elif name.startswith("opt/v/"):
                st.v[name[len("opt/v/"):]] = arr.copy()
        return st


def adam_step(params: dict[str, "T.Parameter"], state: OptimizerState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place. Parameters with no
    accumulated gradient are left untouched."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + epsilon)


@dataclass
class Checkpoint:
    """Full model + optimizer snapshot with its validation score."""
    config: NetworkConfig
    arrays: dict[str, np.ndarray]
    opt_arrays: dict[str, np.ndarray]
    epoch: int
    step: int
    val_mean_auc: float

    @classmethod
    def capture(cls, net: Network, opt: OptimizerState, epoch: int,
                val_mean_auc: float) -> "Checkpoint":
        arrays = {n: a.copy() for n, a in net.state_arrays()}
        opt_arrays = {n: a.copy() for n, a in opt.arrays()}
        return cls(net.config, arrays, opt_arrays, epoch, opt.t, val_mean_auc)

    def save(self, path) -> None:
        meta = {"config": self.config.to_dict(), "epoch": self.epoch,
                "step": self.step, "val_mean_auc": self.val_mean_auc}
        items = sorted(self.arrays.items()) + sorted(self.opt_arrays.items())
        save_archive(path, meta, items)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, arrays = load_archive(path)
        model = {n: a for n, a in arrays.items() if not n.startswith("opt/")}
        opt = {n: a for n, a in arrays.items() if n.startswith("opt/")}
        return cls(NetworkConfig.from_dict(meta["config"]), model, opt,
                   meta["epoch"], meta["step"], meta["val_mean_auc"])

    def restore(self) -> Network:
        net = build(self.config, seed=0)
        net.load_state_arrays(self.arrays, strict=True)
        return net


def _predict_in_batches(net: Network, images: np.ndarray,
                        batch_size: int = 32) -> np.ndarray:
    outs = []
    for i in range(0, images.shape[0], batch_size):
        probs = net.predict_probabilities(Tensor(images[i:i + batch_size]))
        outs.append(probs.data)
    return np.concatenate(outs, axis=0)


def validation_mean_auc(net: Network, images: np.ndarray,
                        targets: np.ndarray, class_names=None) -> float:
    scores = _predict_in_batches(net, images)
    result = evaluate(scores, targets, class_names)
    return result.mean_auc if result.mean_auc is not None else 0.0


def train(net: Network, train_set: tuple[np.ndarray, np.ndarray],
          val_set: tuple[np.ndarray, np.ndarray], config: TrainConfig,
          log_path=None, checkpoint_dir=None) -> tuple[list[Checkpoint], list[dict]]:
    """Adam training loop with plateau lr decay and best-k checkpoint keeping.

    train_set / val_set are (images B x 3 x H x W in normalized form, binary
    targets B x num_classes); train_set may instead be a callable
    epoch -> (images, targets) for on-the-fly augmentation.  Returns the kept
    checkpoints sorted by descending validation mean AUC, plus the per-record
    training log."""
    val_x, val_y = val_set
    train_x, train_y = train_set(0) if callable(train_set) else train_set
    if train_x.shape[0] == 0 or val_x.shape[0] == 0:
        raise ValueError("datasets must be nonempty")
    if not np.all((train_y == 0) | (train_y == 1)):
        raise ValueError("training targets must be binary; apply a label policy first")

    rng = np.random.default_rng(config.seed)
    opt = OptimizerState()
    params = net.parameters()
    lr = config.lr
    best_score = -np.inf
    epochs_since_improvement = 0
    kept: list[Checkpoint] = []
    log: list[dict] = []
    log_file = open(log_path, "w") if log_path else None

    def emit(record: dict) -> None:
        log.append(record)
        if log_file:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

    try:
        step = 0
        for epoch in range(config.max_epochs):
            if callable(train_set) and epoch > 0:
                train_x, train_y = train_set(epoch)
            order = rng.permutation(train_x.shape[0])
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                net.zero_grad()
                logits = net.forward(Tensor(train_x[idx]), train=True)
                loss = bce_with_logits(logits, train_y[idx])
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch} step {step}")
                loss.backward()
                adam_step(params, opt, lr, config.adam_beta1,
                          config.adam_beta2, config.adam_epsilon)
                emit({"epoch": epoch, "step": step, "loss": loss_val, "lr": lr,
                      "val_mean_auc": None})
                step += 1

            score = validation_mean_auc(net, val_x, val_y)
            emit({"epoch": epoch, "step": step, "loss": None, "lr": lr,
                  "val_mean_auc": score})

            ckpt = Checkpoint.capture(net, opt, epoch, score)
            kept.append(ckpt)
            kept.sort(key=lambda c: (-c.val_mean_auc, c.epoch))
            kept = kept[:config.ensemble_size]

            if score > best_score:
                best_score = score
                epochs_since_improvement = 0
            else:
                epochs_since_improvement += 1
                if epochs_since_improvement >= config.patience_epochs:
                    lr *= config.lr_decay_factor
                    epochs_since_improvement = 0
    finally:
        if log_file:
            log_file.close()

    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        for i, ckpt in enumerate(kept):
            ckpt.save(checkpoint_dir / f"ckpt_{i:02d}_epoch{ckpt.epoch:04d}.bin")
    return kept, log


def ensemble_predict(checkpoints: list[Checkpoint], batch: np.ndarray) -> np.ndarray:
    """Arithmetic mean of each member's predicted probabilities."""
    if not checkpoints:
        raise ValueError("empty ensemble")
    ref = checkpoints[0].config.to_dict()
    for c in checkpoints[1:]:
        if c.config.to_dict() != ref:
            raise ValueError("ensemble members have mismatched network configs")
    total = None
    for c in checkpoints:
        probs = _predict_in_batches(c.restore(), np.asarray(batch, dtype=np.float64))
        total = probs if total is None else total + probs
    return total / len(checkpoints)
