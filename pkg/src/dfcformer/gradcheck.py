"""Finite-difference verification of every analytic gradient.

:func:`run_gradcheck` covers each differentiable primitive, the objective
(with respect to embeddings and logits) and a small full-variant model under
the joint loss. Each check reports the worst relative error of one
parameter group.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dfc import FeatureMatrices, ScanFeatures
from .model import ModelConfig, feature_dims_for, init_params
from .numerics import Tensor
from .objective import BatchEmbeddings, LossWeights, total_loss
from .training import batch_loss

TOLERANCE = 1e-5
STEP = 1e-5
# absolute scale below which gradient differences are finite-difference noise
_FLOOR = 1e-8


@dataclass
class CheckResult:
    group: str
    name: str
    rel_error: float

    @property
    def passed(self):
        return self.rel_error < TOLERANCE


def relative_error(analytic, numeric):
    """``max|a - n| / max(max|a|, max|n|)``, with the denominator floored at 1e-8."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), _FLOOR)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_tensors(loss_fn, tensors, h=STEP, corrupt=None):
    """Compare backward() against central differences for each named tensor.

    ``loss_fn`` builds a fresh ``1x1`` loss from the current tensor values.
    ``corrupt`` names one tensor whose analytic gradient is perturbed, for
    fault-injection tests.
    """
    for t in tensors.values():
        t.grad = None
    nx.backward(loss_fn())
    results = []
    for name, t in tensors.items():
        analytic = np.zeros_like(t.values) if t.grad is None else t.grad.copy()
        if name == corrupt:
            analytic = analytic + 1e-3 * (1.0 + np.abs(analytic))
        original = t.values

        def f(theta, t=t, shape=original.shape):
            t.values = theta.reshape(shape)
            with nx.no_grad():
                return loss_fn().item()

        try:
            numeric = nx.finite_diff_grad(f, original.ravel(), h)
        finally:
            t.values = original
        results.append((name, relative_error(analytic, numeric.reshape(original.shape))))
    return results


def _primitive_cases(rng):
    def u(*shape):
        return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)

    def pos(*shape):
        return Tensor(rng.uniform(0.5, 1.5, size=shape), requires_grad=True)

    probes = {}

    def weighted(out, key):
        # fixed random contraction, drawn once per call site
        if key not in probes:
            probes[key] = rng.uniform(-1, 1, size=out.shape)
        return nx.sum(out * probes[key])

    cases = {}
    a, b = u(3, 4), u(4, 2)
    cases["matmul"] = (lambda: weighted(a @ b, 0), {"a": a, "b": b})
    x = u(3, 5)
    cases["softmax_rows"] = (lambda: weighted(nx.softmax_rows(x, 1.7), 1), {"x": x})
    x2, g, be = u(4, 6), u(1, 6), u(1, 6)
    cases["layer_norm"] = (lambda: weighted(nx.layer_norm(x2, g, be), 2), {"x": x2, "gamma": g, "beta": be})
    x3, k, cb = u(7, 3), u(3 * 3, 2), u(1, 2)
    cases["conv1d"] = (lambda: weighted(nx.conv1d(x3, k, cb, stride=2), 3),
                       {"x": x3, "kernels": k, "bias": cb})
    p, q, r = u(3, 3), u(1, 3), pos(3, 1)
    cases["elementwise"] = (
        lambda: weighted(nx.tanh(p) * q + p / r - nx.exp(p) + nx.log(r) + nx.sqrt(r) + nx.softplus(p * 3.0), 4),
        {"p": p, "q": q, "r": r},
    )
    s, t = u(2, 3), u(2, 2)
    cases["concat_slice"] = (
        lambda: weighted(nx.concat([s[:, 0:2], t], axis=1), 5) + weighted(nx.concat([s, s], axis=0).T, 6),
        {"s": s, "t": t},
    )
    m = u(3, 3)
    cases["reductions"] = (lambda: weighted(nx.sum(m * m, axis=1), 7) + nx.mean(nx.relu(m + 0.3)),
                           {"m": m})
    return cases


def tiny_batch(rng, n_rois=4, n_windows=5, labels=(0, 0, 1, 1)):
    """Random feature matrices in (0, 1) standing in for node strengths."""
    out = []
    for i, lab in enumerate(labels):
        temporal = rng.uniform(0.05, 0.95, size=(n_windows, n_rois))
        fc = rng.uniform(-1, 1, size=(n_rois, n_rois))
        fc = 0.5 * (fc + fc.T)
        np.fill_diagonal(fc, 1.0)
        out.append(ScanFeatures(f"s{i}", f"s{i}", int(lab), FeatureMatrices(temporal), fc))
    return out


def run_gradcheck(seed=0, corrupt=None, model_config=None, n_rois=4, n_windows=5):
    """Run every check; returns a list of :class:`CheckResult`."""
    rng = np.random.default_rng(seed)
    results = []
    for case, (fn, tensors) in _primitive_cases(rng).items():
        for name, err in check_tensors(fn, tensors, corrupt=corrupt):
            results.append(CheckResult(f"numerics.{case}", name, err))

    emb = Tensor(rng.uniform(-1, 1, size=(4, 3)), requires_grad=True, name="embeddings")
    logits = Tensor(rng.uniform(-2, 2, size=(4, 1)), requires_grad=True, name="logits")
    weights = LossWeights(alpha=0.7, beta=1.3, tau=0.5)
    labels = [0, 1, 0, 1]

    def objective():
        return total_loss(BatchEmbeddings(emb, labels, logits), weights).total

    for name, err in check_tensors(objective, {"embeddings": emb, "logits": logits}, corrupt=corrupt):
        results.append(CheckResult("objective", name, err))

    learn = LossWeights(alpha=0.8, beta=1.2, mode="learnable", tau=0.7)
    free = {"embeddings": emb, "logits": logits, **learn.tensors()}

    def learnable():
        return total_loss(BatchEmbeddings(emb, labels, logits), learn).total

    for name, err in check_tensors(learnable, free, corrupt=corrupt):
        results.append(CheckResult("objective.learnable", name, err))

    config = model_config or ModelConfig(d_model=8, heads=2, ffn_hidden=8, conv_kernel=2,
                                         conv_stride=1, conv_channels=4, embed_dim=4)
    samples = tiny_batch(rng, n_rois, n_windows, labels=(0, 0, 1, 1, 0))
    params = init_params(seed, config, feature_dims_for(config, n_windows, n_rois))
    loss_weights = LossWeights()

    def model_loss():
        return batch_loss(samples, params, loss_weights)[0].total

    for name, err in check_tensors(model_loss, dict(params.items()), corrupt=corrupt):
        results.append(CheckResult(f"model.{config.variant}", name, err))
    return results


def format_report(results):
    """One line per parameter group: worst error and the parameter that produced it."""
    groups = {}
    for r in results:
        worst = groups.get(r.group)
        if worst is None or r.rel_error > worst.rel_error:
            groups[r.group] = r
    lines = []
    for group, r in groups.items():
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{status:4s} {group:24s} worst rel. error {r.rel_error:.3e} ({r.name})")
    failed = [r for r in results if not r.passed]
    for r in failed:
        lines.append(f"failing parameter: {r.group}/{r.name} rel. error {r.rel_error:.3e}")
    return "\n".join(lines)

