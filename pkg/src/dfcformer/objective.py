"""Supervised contrastive loss, binary cross-entropy and their weighted sum.

Positives are pairs of distinct scans that share a diagnosis. For an anchor
``i`` and positive ``p`` the per-pair term is::

    l(i, p) = log sum_{k != i} exp(d(i, k) / tau) - d(i, p) / tau

with ``d`` the cosine similarity. The contrastive loss is the mean of
``l(i, p)`` over every (anchor, positive) pair in the batch.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, ContractError
from .numerics import Tensor


@dataclass
class BatchEmbeddings:
    """``embeddings`` is ``B x E``, ``logits`` is ``B x 1``, ``labels`` has length ``B``."""

    embeddings: Tensor
    labels: np.ndarray
    logits: Tensor = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.shape[0] != len(self.labels):
            raise ContractError(
                f"{self.embeddings.shape[0]} embeddings but {len(self.labels)} labels"
            )


@dataclass
class LossWeights:
    """Weights of the joint objective.

    In ``learnable`` mode alpha and beta are ``softplus`` of the free
    tensors ``alpha_raw`` and ``beta_raw``, so they stay positive.
    """

    alpha: float = 1.0
    beta: float = 1.0
    mode: str = "fixed"
    tau: float = 0.5
    alpha_raw: Tensor = field(default=None, repr=False)
    beta_raw: Tensor = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("fixed", "learnable"):
            raise ConfigError(f"loss mode must be 'fixed' or 'learnable', got {self.mode!r}")
        if not self.tau > 0:
            raise ConfigError(f"temperature tau must be positive, got {self.tau}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")
        if self.mode == "learnable":
            if self.alpha <= 0 or self.beta <= 0:
                raise ConfigError("learnable loss weights start from positive alpha and beta")
            if self.alpha_raw is None:
                self.alpha_raw = Tensor(_inverse_softplus(self.alpha), requires_grad=True, name="loss.alpha_raw")
            if self.beta_raw is None:
                self.beta_raw = Tensor(_inverse_softplus(self.beta), requires_grad=True, name="loss.beta_raw")

    def tensors(self):
        """Free parameters to optimise (empty in fixed mode)."""
        if self.mode == "fixed":
            return {}
        return {"loss.alpha_raw": self.alpha_raw, "loss.beta_raw": self.beta_raw}

    def current(self):
        if self.mode == "fixed":
            return self.alpha, self.beta
        return (nx.softplus(self.alpha_raw).item(), nx.softplus(self.beta_raw).item())


def _inverse_softplus(y):
    return float(y + np.log(-np.expm1(-y)))


@dataclass
class LossBreakdown:
    total: Tensor
    contrastive: Tensor
    cross_entropy: Tensor
    skipped_anchors: int


def cosine_sim(u, v):
    """Cosine similarity of two ``1 x E`` tensors, as a ``1x1`` tensor."""
    u, v = nx.as_tensor(u), nx.as_tensor(v)
    if u.shape != v.shape or u.shape[0] != 1:
        raise ContractError(f"cosine_sim needs two row vectors of equal length, got {u.shape}, {v.shape}")
    if not (np.any(u.values) and np.any(v.values)):
        raise ContractError("cosine similarity is undefined for a zero-norm vector")
    num = nx.sum(u * v)
    return num / (nx.sqrt(nx.sum(u * u)) * nx.sqrt(nx.sum(v * v)))


def similarity_matrix(z):
    """Pairwise cosine similarities of the rows of ``z``."""
    norms = np.sqrt((z.values * z.values).sum(axis=1))
    if (norms == 0).any():
        raise ContractError(f"embedding row {int(np.flatnonzero(norms == 0)[0])} has zero norm")
    unit = z / nx.sqrt(nx.sum(z * z, axis=1))
    return unit @ unit.T


def pair_mask(labels):
    """``mask[i, j] = 1`` iff ``i != j`` and the two labels agree."""
    labels = np.asarray(labels)
    if labels.size < 2:
        raise ContractError(f"pairs need at least 2 samples, got {labels.size}")
    mask = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(mask, 0.0)
    return mask


def anchors_without_positive(labels):
    return int((pair_mask(labels).sum(axis=1) == 0).sum())


def contrastive_loss(batch, tau):
    if not tau > 0:
        raise ConfigError(f"temperature tau must be positive, got {tau}")
    positives = pair_mask(batch.labels)
    n_pairs = positives.sum()
    if n_pairs == 0:
        raise ContractError("degenerate batch: no anchor has a positive partner")
    b = positives.shape[0]
    off_diag = 1.0 - np.eye(b)
    sim = similarity_matrix(batch.embeddings)
    # similarities are at most 1, so shifting by 1/tau keeps exp() in range
    shifted = nx.exp((sim - 1.0) * (1.0 / tau))
    log_denom = nx.log(nx.sum(shifted * off_diag, axis=1)) + 1.0 / tau
    terms = log_denom - sim * (1.0 / tau)
    return nx.sum(terms * positives) * (1.0 / n_pairs)


def pair_terms(batch, tau):
    """Every ``l(i, p)`` as a ``{(i, p): value}`` dict, evaluated without a graph."""
    with nx.no_grad():
        sim = similarity_matrix(batch.embeddings).values
    positives = pair_mask(batch.labels)
    out = {}
    for i in range(len(sim)):
        others = np.delete(sim[i], i) / tau
        top = others.max()
        log_denom = top + np.log(np.exp(others - top).sum())
        for p in np.flatnonzero(positives[i]):
            out[(i, int(p))] = float(log_denom - sim[i, p] / tau)
    return out


def cross_entropy(logits, labels):
    """Mean binary cross-entropy of ``sigmoid(logits)`` in the stable logit form."""
    logits = nx.as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if logits.shape == (1, len(y)) and len(y) > 1:
        logits = logits.T
    if logits.shape != y.shape:
        raise ContractError(f"{logits.shape} logits for {len(y)} labels")
    # -[y log s(z) + (1-y) log(1 - s(z))] = softplus(z) - y z
    return nx.mean(nx.softplus(logits) - logits * y)


def total_loss(batch, weights):
    """Weighted joint loss; also returns the two components for logging."""
    ce = cross_entropy(batch.logits, batch.labels)
    skipped = anchors_without_positive(batch.labels)
    if weights.mode == "fixed":
        if weights.alpha == 0:
            con = contrastive_loss(batch, weights.tau) if skipped < len(batch.labels) else Tensor(0.0)
            return LossBreakdown(ce * weights.beta, con, ce, skipped)
        con = contrastive_loss(batch, weights.tau)
        return LossBreakdown(con * weights.alpha + ce * weights.beta, con, ce, skipped)
    con = contrastive_loss(batch, weights.tau)
    alpha = nx.softplus(weights.alpha_raw)
    beta = nx.softplus(weights.beta_raw)
    return LossBreakdown(alpha * con + beta * ce, con, ce, skipped)
