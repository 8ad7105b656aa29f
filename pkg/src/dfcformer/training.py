"""AdamW training loop."""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, ContractError, NumericalError
from .model import feature_dims_for, init_params, model_forward
from .objective import BatchEmbeddings, LossWeights, total_loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 64
    batch_size: int = 8
    lr: float = 2e-6
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    alpha: float = 1.0
    beta: float = 1.0
    loss_mode: str = "fixed"
    tau: float = 0.5

    def __post_init__(self):
        if not isinstance(self.epochs, (int, np.integer)) or self.epochs < 1:
            raise ConfigError(f"train.epochs must be an integer >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, (int, np.integer)) or self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be an integer >= 2, got {self.batch_size!r}")
        if not self.lr >= 0:
            raise ConfigError(f"train.lr must be non-negative, got {self.lr}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"train.weight_decay must be non-negative, got {self.weight_decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("AdamW needs beta1, beta2 in [0, 1) and adam_eps > 0")
        self.loss_weights()

    def loss_weights(self):
        """A fresh :class:`LossWeights`; learnable mode gets new free tensors each call."""
        return LossWeights(alpha=self.alpha, beta=self.beta, mode=self.loss_mode, tau=self.tau)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, values):
        return cls(np.zeros_like(values), np.zeros_like(values), 0)


def adamw_step(param, grad, state, config):
    """One AdamW update with decoupled weight decay.

    Returns the new parameter array and the new state; inputs are not modified.
    """
    b1, b2 = config.beta1, config.beta2
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    new = param - config.lr * (m_hat / (np.sqrt(v_hat) + config.adam_eps)) - config.lr * config.weight_decay * param
    return new, AdamState(m, v, step)


def _has_positive_pair(labels):
    return labels.size > np.unique(labels).size


def make_batches(labels, batch_size, seed, epoch):
    """Shuffle indices deterministically per ``(seed, epoch)`` and cut them into batches.

    A batch without any same-label pair is merged into the batch after it.
    A trailing batch that is smaller than two scans, holds a single class or
    has no same-label pair is merged into the batch before it.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("cannot batch an empty training set")
    if np.unique(labels).size < 2:
        raise ContractError("training set holds a single class; contrastive pairs are undefined")
    order = np.random.default_rng([seed, epoch]).permutation(labels.size)
    batches = []
    for i in range(0, labels.size, batch_size):
        chunk = order[i:i + batch_size]
        if batches and not _has_positive_pair(labels[batches[-1]]):
            batches[-1] = np.concatenate([batches[-1], chunk])
        else:
            batches.append(chunk)
    if len(batches) > 1:
        last = labels[batches[-1]]
        if last.size < 2 or np.unique(last).size < 2 or not _has_positive_pair(last):
            tail = batches.pop()
            batches[-1] = np.concatenate([batches[-1], tail])
    return batches


@dataclass
class TrainHistory:
    total: list = field(default_factory=list)
    contrastive: list = field(default_factory=list)
    cross_entropy: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)

    def __len__(self):
        return len(self.total)

    def as_dict(self):
        return {"total": self.total, "contrastive": self.contrastive,
                "cross_entropy": self.cross_entropy, "accuracy": self.accuracy}


def batch_loss(samples, params, weights):
    """Forward every sample of a batch and evaluate the joint objective."""
    variant = params.config.variant
    logits, embeddings = [], []
    for s in samples:
        logit, emb = model_forward(s.model_input(variant), params)
        logits.append(logit)
        embeddings.append(emb)
    batch = BatchEmbeddings(nx.concat(embeddings, axis=0), [s.label for s in samples],
                            nx.concat(logits, axis=0))
    return total_loss(batch, weights), batch


def fit(train_set, config, model_config, params=None):
    """Train a model on ``train_set`` (a list of :class:`~dfcformer.dfc.ScanFeatures`).

    Returns
    -------
    (ModelParams, TrainHistory)
    """
    train_set = list(train_set)
    if not train_set:
        raise ContractError("empty training set")
    labels = np.array([s.label for s in train_set])
    first = train_set[0].features
    model_config.check_tokens(first.n_windows, first.n_rois)
    for s in train_set:
        if s.features.temporal.shape != first.temporal.shape:
            raise ContractError(
                f"scan {s.scan_id} has features {s.features.temporal.shape}, expected {first.temporal.shape}"
            )
    if params is None:
        params = init_params(config.seed, model_config,
                             feature_dims_for(model_config, first.n_windows, first.n_rois))
    weights = config.loss_weights()
    trainable = dict(params.items())
    trainable.update(weights.tensors())
    states = {name: AdamState.zeros_like(t.values) for name, t in trainable.items()}
    history = TrainHistory()

    for epoch in range(config.epochs):
        sums = np.zeros(4)
        for b, idx in enumerate(make_batches(labels, config.batch_size, config.seed, epoch)):
            for t in trainable.values():
                t.grad = None
            try:
                parts, batch = batch_loss([train_set[i] for i in idx], params, weights)
                nx.backward(parts.total)
            except NumericalError as err:
                raise NumericalError(f"epoch {epoch + 1}, batch {b + 1}: {err}") from None
            for name, t in trainable.items():
                if t.grad is None:
                    raise ContractError(f"parameter {name} received no gradient")
                t.values, states[name] = adamw_step(t.values, t.grad, states[name], config)
                if not np.isfinite(t.values).all():
                    raise NumericalError(f"epoch {epoch + 1}, batch {b + 1}: parameter {name} became non-finite")
                t.values.flags.writeable = False
            correct = ((batch.logits.values[:, 0] > 0).astype(int) == batch.labels).sum()
            n = len(idx)
            sums += [parts.total.item() * n, parts.contrastive.item() * n,
                     parts.cross_entropy.item() * n, correct]
        sums /= len(train_set)
        history.total.append(float(sums[0]))
        history.contrastive.append(float(sums[1]))
        history.cross_entropy.append(float(sums[2]))
        history.accuracy.append(float(sums[3]))
    return params, history
