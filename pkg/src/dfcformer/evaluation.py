"""Subject-level cross-validation, classification metrics and the ablation runner."""

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .exceptions import ContractError, DfcError
from .model import VARIANTS, predict_logits
from .training import fit

METRIC_NAMES = ("acc", "sen", "spe", "auc", "f1")


@dataclass(frozen=True)
class FoldSplit:
    """Stratified assignment of subjects to ``k`` test folds."""

    k: int
    assignment: dict

    def test_subjects(self, fold):
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def train_subjects(self, fold):
        return sorted(s for s, f in self.assignment.items() if f != fold)

    def split(self, scans, fold):
        """``(train, test)`` scan lists for one fold, preserving input order."""
        missing = {s.subject_id for s in scans} - set(self.assignment)
        if missing:
            raise ContractError(f"subjects without a fold assignment: {sorted(missing)[:5]}")
        train = [s for s in scans if self.assignment[s.subject_id] != fold]
        test = [s for s in scans if self.assignment[s.subject_id] == fold]
        return train, test


@dataclass
class Metrics:
    """Confusion counts with MCI as the positive class.

    ``sen``, ``spe`` and ``auc`` are ``None`` when undefined for the data
    (no positives, no negatives, or a single class respectively).
    """

    tp: int
    tn: int
    fp: int
    fn: int
    acc: float
    sen: float = None
    spe: float = None
    f1: float = None
    auc: float = None

    def as_dict(self):
        return asdict(self)


def subject_labels(scans):
    """``{subject_id: label}``, checking that a subject's scans agree."""
    labels = {}
    for s in scans:
        prev = labels.setdefault(s.subject_id, s.label)
        if prev != s.label:
            raise ContractError(f"subject {s.subject_id} has scans with different labels")
    return labels


def kfold_split(subjects, k, seed):
    """Stratified subject-level folds.

    Parameters
    ----------
    subjects : dict
        ``{subject_id: label}``.
    k : int
        Number of folds.
    seed : int
        Shuffle seed.
    """
    if k < 2:
        raise ContractError(f"need at least 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    assignment = {}
    for label in sorted(set(subjects.values())):
        ids = sorted(s for s, lab in subjects.items() if lab == label)
        if len(ids) < k:
            raise ContractError(f"class {label} has {len(ids)} subjects, fewer than k={k}")
        for pos, i in enumerate(rng.permutation(len(ids))):
            assignment[ids[i]] = pos % k
    if len(set(subjects.values())) < 2:
        raise ContractError("cross-validation needs subjects from both classes")
    return FoldSplit(k, assignment)


def confusion_metrics(predictions, labels):
    pred = np.asarray(predictions).astype(int)
    y = np.asarray(labels).astype(int)
    if pred.size == 0 or pred.shape != y.shape:
        raise ContractError(f"need matching non-empty predictions and labels, got {pred.shape}, {y.shape}")
    tp = int(((pred == 1) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    return Metrics(
        tp, tn, fp, fn,
        acc=(tp + tn) / (tp + tn + fp + fn),
        sen=tp / (tp + fn) if tp + fn else None,
        spe=tn / (tn + fp) if tn + fp else None,
        f1=2 * tp / (2 * tp + fp + fn) if tp + fp + fn else None,
    )


def auc(scores, labels):
    """Rank-sum AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def evaluate(logits, labels):
    m = confusion_metrics((np.asarray(logits) > 0).astype(int), labels)
    if len(set(np.asarray(labels).tolist())) == 2:
        m.auc = auc(logits, labels)
    return m


@dataclass
class FoldResult:
    fold: int
    seed: int
    metrics: Metrics
    train_subjects: list
    test_subjects: list
    test_scans: list
    logits: list
    history: dict = field(default_factory=dict)


@dataclass
class CVResult:
    variant: str
    folds: list
    mean: dict
    std: dict


def aggregate(folds):
    """Unweighted mean and sample standard deviation over folds, skipping undefined values."""
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = [getattr(f.metrics, name) for f in folds]
        vals = np.array([v for v in vals if v is not None], dtype=np.float64)
        mean[name] = float(vals.mean()) if vals.size else None
        std[name] = float(vals.std(ddof=1)) if vals.size > 1 else None
    return mean, std


def fold_seed(seed, fold):
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def run_fold(scans, split, fold, model_config, train_config, seed):
    train, test = split.split(scans, fold)
    tseed = fold_seed(seed, fold)
    params, history = fit(train, replace(train_config, seed=tseed), model_config)
    logits = predict_logits(test, params)
    labels = [s.label for s in test]
    return FoldResult(
        fold=fold,
        seed=tseed,
        metrics=evaluate(logits, labels),
        train_subjects=split.train_subjects(fold),
        test_subjects=split.test_subjects(fold),
        test_scans=[s.scan_id for s in test],
        logits=[float(v) for v in logits],
        history=history.as_dict(),
    ), params


def run_cv(scans, model_config, train_config, k=5, seed=0, split=None, progress=None):
    """Subject-level k-fold cross-validation of one model variant.

    ``scans`` is a list of :class:`~dfcformer.dfc.ScanFeatures`. Each fold
    trains with a seed derived from ``(seed, fold)``; scans are scored
    individually.
    """
    if split is None:
        split = kfold_split(subject_labels(scans), k, seed)
    folds = []
    for fold in range(split.k):
        try:
            result, _ = run_fold(scans, split, fold, model_config, train_config, seed)
        except DfcError as err:
            err.args = (f"fold {fold}: {err}",) + err.args[1:]
            raise
        folds.append(result)
        if progress is not None:
            progress(model_config.variant, result)
    mean, std = aggregate(folds)
    return CVResult(model_config.variant, folds, mean, std)


def run_ablation(scans, model_config, train_config, k=5, seed=0, variants=VARIANTS, progress=None):
    """Cross-validate each variant on the same folds with the same per-fold seeds."""
    split = kfold_split(subject_labels(scans), k, seed)
    return {v: run_cv(scans, replace(model_config, variant=v), train_config, k, seed, split, progress)
            for v in variants}
