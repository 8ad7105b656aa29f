"""Sliding-window dynamic functional connectivity.

A scan's ROI time series (``time x ROIs``) is cut into overlapping windows
of ``L`` samples advanced by ``S`` samples. Each window yields a Pearson
correlation matrix; each matrix is summarised per ROI by its node strength,
producing a ``windows x ROIs`` temporal feature matrix and its transpose,
the spatial feature matrix.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DataError, DegenerateColumnError

NC = 0
MCI = 1
LABEL_NAMES = {NC: "NC", MCI: "MCI"}
LABEL_CODES = {name: code for code, name in LABEL_NAMES.items()}

# relative to the column's magnitude; catches constant columns whose
# centred values are rounding residue rather than exact zeros
_DEGENERATE_RTOL = 1e-12


@dataclass(frozen=True)
class BoldSeries:
    """One scan: ``samples`` is ``L_total x N`` with ROIs as columns."""

    subject_id: str
    scan_id: str
    label: int
    samples: np.ndarray
    roi_names: tuple = field(default=None)

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise DataError(f"scan {self.scan_id}: samples must be 2-D, got shape {samples.shape}")
        if samples.shape[1] < 2:
            raise DataError(f"scan {self.scan_id}: need at least 2 ROIs, got {samples.shape[1]}")
        if not np.isfinite(samples).all():
            raise DataError(f"scan {self.scan_id}: samples contain missing or non-finite values")
        if self.label not in LABEL_NAMES:
            raise DataError(f"scan {self.scan_id}: label must be 0 (NC) or 1 (MCI), got {self.label!r}")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        names = self.roi_names
        if names is None:
            names = tuple(f"roi_{i}" for i in range(samples.shape[1]))
        if len(names) != samples.shape[1]:
            raise DataError(f"scan {self.scan_id}: {len(names)} ROI names for {samples.shape[1]} columns")
        object.__setattr__(self, "roi_names", tuple(names))

    @property
    def n_rois(self):
        return self.samples.shape[1]

    @property
    def n_timepoints(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class WindowSpec:
    length: int = 70
    stride: int = 2

    def __post_init__(self):
        if self.length < 2:
            raise ContractError(f"window length must be >= 2, got {self.length}")
        if not 1 <= self.stride <= self.length:
            raise ContractError(f"stride must lie in [1, {self.length}], got {self.stride}")


@dataclass(frozen=True)
class DfcSequence:
    """``matrices`` has shape ``(T, N, N)``; ``window_starts`` has length ``T``."""

    matrices: np.ndarray
    window_starts: np.ndarray

    def __len__(self):
        return len(self.matrices)

    def __getitem__(self, t):
        return self.matrices[t]


@dataclass(frozen=True)
class FeatureMatrices:
    """Temporal features (``T x N``, one token per window) and their transpose."""

    temporal: np.ndarray

    @property
    def spatial(self):
        return self.temporal.T

    @property
    def n_windows(self):
        return self.temporal.shape[0]

    @property
    def n_rois(self):
        return self.temporal.shape[1]


def window_count(n_timepoints, spec):
    if n_timepoints < spec.length:
        raise ContractError(
            f"series of {n_timepoints} time points is shorter than the window length {spec.length}"
        )
    return (n_timepoints - spec.length) // spec.stride + 1


def window_starts(n_timepoints, spec):
    return spec.stride * np.arange(window_count(n_timepoints, spec))


def pearson_matrix(window):
    """Sample Pearson correlation between every pair of columns.

    Raises
    ------
    DegenerateColumnError
        If any column is constant within the window.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError(f"pearson_matrix needs at least 2 rows of a 2-D window, got {x.shape}")
    centered = x - x.mean(axis=0)
    norms = np.sqrt((centered * centered).sum(axis=0))
    scale = np.abs(x).max(axis=0)
    bad = norms <= _DEGENERATE_RTOL * np.maximum(scale, 1.0) * np.sqrt(x.shape[0])
    if bad.any():
        raise DegenerateColumnError(int(np.flatnonzero(bad)[0]))
    z = centered / norms
    corr = z.T @ z
    corr = 0.5 * (corr + corr.T)
    np.clip(corr, -1.0, 1.0, out=corr)
    np.fill_diagonal(corr, 1.0)
    return corr


def build_dfc(series, spec):
    """Correlation matrix of every window, in window order."""
    samples = series.samples
    starts = window_starts(samples.shape[0], spec)
    mats = np.empty((len(starts), samples.shape[1], samples.shape[1]))
    for t, s in enumerate(starts):
        try:
            mats[t] = pearson_matrix(samples[s : s + spec.length])
        except DegenerateColumnError as err:
            raise DegenerateColumnError(
                err.roi,
                f"scan {series.scan_id}: ROI {err.roi} has zero variance in window starting at {s}",
            ) from None
    return DfcSequence(mats, starts)


def node_strength(fc):
    """Mean absolute off-diagonal correlation of each ROI."""
    fc = np.asarray(fc, dtype=np.float64)
    n = fc.shape[0]
    a = np.abs(fc)
    return (a.sum(axis=1) - np.diag(a)) / (n - 1)


def build_features(dfc):
    if len(dfc) < 1:
        raise ContractError("a dFC sequence needs at least one window")
    a = np.abs(dfc.matrices)
    n = a.shape[1]
    temporal = (a.sum(axis=2) - np.diagonal(a, axis1=1, axis2=2)) / (n - 1)
    temporal.flags.writeable = False
    return FeatureMatrices(temporal)


def static_fc(series):
    """Correlation over the whole scan, i.e. a single window of full length."""
    try:
        return pearson_matrix(series.samples)
    except DegenerateColumnError as err:
        raise DegenerateColumnError(err.roi, f"scan {series.scan_id}: ROI {err.roi} is constant") from None


@dataclass(frozen=True)
class ScanFeatures:
    """Model-ready inputs of one scan, with its identity and label."""

    subject_id: str
    scan_id: str
    label: int
    features: FeatureMatrices
    static: np.ndarray

    def model_input(self, variant):
        """The input a model variant consumes; ``os_fc`` only ever sees the static FC."""
        return self.static if variant == "os_fc" else self.features


def extract(series, spec):
    """Windowed features and static FC of one scan."""
    return ScanFeatures(
        subject_id=series.subject_id,
        scan_id=series.scan_id,
        label=series.label,
        features=build_features(build_dfc(series, spec)),
        static=static_fc(series),
    )
