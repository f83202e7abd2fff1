"""Black-box binary classifier (validity oracle) and the timestep-aware
guidance classifier trained on forward-diffused rows."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container, diffusion, nn

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (128, 64, 32)
    lr: float = 5e-4
    epochs: int = 600
    batch_size: int = 256
    t_dim: int = 32  # guidance classifier only


@dataclass
class BlackBoxClassifier:
    net: nn.DenseNet
    curve: list = field(default_factory=list)  # (epoch, loss, accuracy)
    degenerate: bool = False

    def predict_proba(self, X) -> np.ndarray:
        return nn.forward(self.net, X)[:, 0].astype(np.float64)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int8)

    def save(self, path, schema_hash: str | None = None) -> None:
        container.save_net(
            path, self.net, "blackbox",
            {"degenerate": self.degenerate, "schema_hash": schema_hash},
        )

    @staticmethod
    def load(path) -> "BlackBoxClassifier":
        kind, meta, arrays = container.load(path)
        if kind != "blackbox":
            raise container.ContainerError(f"{path}: expected blackbox, got {kind}")
        model = BlackBoxClassifier(container.net_from_arrays(meta, arrays),
                                   degenerate=meta["degenerate"])
        model.schema_hash = meta.get("schema_hash")
        return model


def _train_bce(net, X, y, cfg, rng, extra_inputs=None):
    """Minibatch Adam/BCE loop shared by both classifiers; returns the
    training curve. extra_inputs lets the caller re-noise per epoch."""
    state = nn.adam_init(nn.net_params(net), lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        Xe = extra_inputs(epoch) if extra_inputs is not None else X
        losses, hits, count = 0.0, 0, 0
        for idx in nn.iterate_minibatches(len(y), cfg.batch_size, rng):
            xb, yb = Xe[idx], y[idx]
            p = nn.forward(net, xb)[:, 0]
            loss_vec, dldp = nn.bce_loss(p, yb)
            loss = float(np.mean(loss_vec, dtype=np.float64))
            if not np.isfinite(loss):
                raise nn.TrainingDiverged(
                    f"classifier loss non-finite at epoch {epoch} (lr={cfg.lr})"
                )
            upstream = (dldp / len(yb)).astype(np.float32)[:, None]
            grads, _ = nn.backward(net, xb, upstream)
            nn.adam_step(state, nn.net_params(net), grads)
            losses += loss * len(yb)
            hits += int(((p >= 0.5) == (yb == 1)).sum())
            count += len(yb)
        curve.append((epoch, losses / count, hits / count))
    return curve


def train_blackbox(dataset, preprocessor, cfg: TrainConfig, seed: int) -> BlackBoxClassifier:
    """Train the sigmoid-output MLP on encoded rows; deterministic under seed."""
    rng = np.random.default_rng(seed)
    X = preprocessor.encode_dataset(dataset)
    y = dataset.labels.astype(np.float64)
    degenerate = len(np.unique(dataset.labels)) < 2
    if degenerate:
        log.warning("train_blackbox: single-class labels, model is degenerate")
    net = nn.build_net(
        (X.shape[1], *cfg.hidden, 1),
        ["relu"] * len(cfg.hidden) + ["sigmoid"],
        seed=rng.integers(2**31),
    )
    curve = _train_bce(net, X, y, cfg, rng)
    return BlackBoxClassifier(net, curve, degenerate)


def evaluate(model, dataset, preprocessor) -> tuple[float, float]:
    """(accuracy, F1 of the attack class) at threshold 0.5."""
    if len(dataset) == 0:
        raise ValueError("empty test set")
    pred = model.predict(preprocessor.encode_dataset(dataset))
    return accuracy_f1(pred, dataset.labels)


def accuracy_f1(pred, labels) -> tuple[float, float]:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    acc = float((pred == labels).mean())
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return acc, f1


@dataclass
class GuidanceClassifier:
    """Sigmoid MLP over [encoded row | timestep embedding]; defined for every
    t in [0, T] of the schedule it was trained against."""

    net: nn.DenseNet
    t_dim: int
    curve: list = field(default_factory=list)

    def _input(self, X, t_values):
        t = np.full(len(X), t_values, dtype=np.float64) if np.ndim(t_values) == 0 else t_values
        emb = nn.timestep_embedding(t, self.t_dim).astype(self.net.dtype)
        return np.concatenate([np.asarray(X, dtype=self.net.dtype), emb], axis=1)

    def predict_proba(self, X, t_values) -> np.ndarray:
        return nn.forward(self.net, self._input(X, t_values))[:, 0].astype(np.float64)

    def bce_input_grad(self, X, t_values, y):
        """(probabilities, d BCE / d X) for guidance; the embedding columns
        of the input gradient are discarded."""
        inp = self._input(X, t_values)
        p = nn.forward(self.net, inp)[:, 0].astype(np.float64)
        _, dldp = nn.bce_loss(p, y)
        _, gin = nn.backward(self.net, inp, dldp.astype(self.net.dtype)[:, None])
        return p, gin[:, : np.shape(X)[1]].astype(np.float64)

    def save(self, path, schema_hash: str | None = None) -> None:
        container.save_net(path, self.net, "guidance",
                           {"t_dim": self.t_dim, "schema_hash": schema_hash})

    @staticmethod
    def load(path) -> "GuidanceClassifier":
        kind, meta, arrays = container.load(path)
        if kind != "guidance":
            raise container.ContainerError(f"{path}: expected guidance, got {kind}")
        clf = GuidanceClassifier(container.net_from_arrays(meta, arrays), meta["t_dim"])
        clf.schema_hash = meta.get("schema_hash")
        return clf


class BlackboxGuidance:
    """Ablation adapter: use the clean black-box as the guidance signal,
    ignoring the timestep."""

    def __init__(self, blackbox: BlackBoxClassifier):
        self.blackbox = blackbox

    def predict_proba(self, X, t_values):
        return self.blackbox.predict_proba(X)

    def bce_input_grad(self, X, t_values, y):
        net = self.blackbox.net
        p = self.blackbox.predict_proba(X)
        _, dldp = nn.bce_loss(p, y)
        _, gin = nn.backward(net, np.asarray(X, net.dtype), dldp.astype(net.dtype)[:, None])
        return p, gin.astype(np.float64)


def train_guidance(schedule, dataset, preprocessor, cfg: TrainConfig, seed: int) -> GuidanceClassifier:
    """Train on forward-diffused rows x_t (labels unchanged) with t uniform
    over [0, T]; re-noised every epoch."""
    rng = np.random.default_rng(seed)
    X = preprocessor.encode_dataset(dataset)
    n_num, cat_sizes = preprocessor.n_num, preprocessor.cat_sizes
    x_num0 = X[:, :n_num].astype(np.float64)
    codes0 = dataset.cat
    y = dataset.labels.astype(np.float64)

    net = nn.build_net(
        (X.shape[1] + cfg.t_dim, *cfg.hidden, 1),
        ["relu"] * len(cfg.hidden) + ["sigmoid"],
        seed=rng.integers(2**31),
    )
    clf = GuidanceClassifier(net, cfg.t_dim)

    def noised_inputs(epoch):
        t = rng.integers(0, schedule.T + 1, size=len(X))
        eps = rng.standard_normal(x_num0.shape)
        u = rng.random((len(X), len(cat_sizes)))
        x_t, codes_t = diffusion.diffuse_rows(
            x_num0, codes0, schedule.alpha_bar[t], cat_sizes, eps, u
        )
        x_enc = np.concatenate(
            [x_t.astype(np.float32), diffusion.onehot(codes_t, cat_sizes)], axis=1
        )
        return np.concatenate([x_enc, nn.timestep_embedding(t, cfg.t_dim)], axis=1)

    clf.curve = _train_bce(net, None, y, cfg, rng, extra_inputs=noised_inputs)
    return clf


def write_curve_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch,loss,accuracy\n")
        for epoch, loss, acc in curve:
            fh.write(f"{epoch},{loss!r},{acc!r}\n")
