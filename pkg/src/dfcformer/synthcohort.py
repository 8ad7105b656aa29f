"""Synthetic BOLD-like cohorts with group-dependent switching dynamics.

Every scan alternates between two latent connectivity states. Within a
state, samples are Gaussian with the state's correlation template. Both
groups share the templates; they differ only in how long each state lasts
(geometric dwell times).

On top of the switching signal and white observation noise, each scan gets
a "trait" component: one ROI module, picked at random, shares a common
factor for the whole scan with a random amplitude. It is constant across
windows, so it leaves the window-to-window dynamics alone but blurs the
whole-scan module imbalance that slow switchers would otherwise show. Set
``trait_coupling=0`` to disable it.
"""

from dataclasses import dataclass, field

import numpy as np

from .dfc import LABEL_NAMES, MCI, NC, BoldSeries, WindowSpec, window_starts
from .exceptions import ConfigError, ContractError, DataError


def default_templates(n_rois, within=0.9):
    """Two states, each with one strongly coupled half of the ROIs.

    State 0 couples the first ``n_rois // 2`` ROIs, state 1 the rest.
    """
    half = n_rois // 2
    templates = np.zeros((2, n_rois, n_rois))
    for s, block in enumerate((slice(0, half), slice(half, n_rois))):
        templates[s, block, block] = within
        np.fill_diagonal(templates[s], 1.0)
    return templates


@dataclass(frozen=True)
class SynthConfig:
    """Cohort recipe.

    ``dwell_mean_by_group[g][s]`` is the mean dwell (in samples) of state
    ``s`` for group ``g`` (0 = NC, 1 = MCI). ``templates`` defaults to
    :func:`default_templates`.
    """

    n_subjects_per_group: int = 30
    scans_per_subject: int = 1
    n_rois: int = 12
    n_timepoints: int = 200
    dwell_mean_by_group: tuple = ((40.0, 40.0), (2.0, 2.0))
    noise_std: float = 0.3
    within: float = 0.9
    trait_coupling: float = 1.0
    templates: np.ndarray = field(default=None, repr=False)
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects_per_group", "scans_per_subject", "n_rois", "n_timepoints"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"synth.{name} must be a positive integer, got {value!r}")
        if self.n_rois < 2:
            raise ConfigError("synth.n_rois must be at least 2")
        dwell = np.asarray(self.dwell_mean_by_group, dtype=np.float64)
        if dwell.shape != (2, 2):
            raise ConfigError(f"synth.dwell_mean_by_group must be 2 groups x 2 states, got shape {dwell.shape}")
        if (dwell < 2).any():
            raise ConfigError("synth.dwell_mean_by_group entries must be >= 2")
        object.__setattr__(self, "dwell_mean_by_group", tuple(map(tuple, dwell.tolist())))
        if not self.noise_std > 0:
            raise ConfigError(f"synth.noise_std must be positive, got {self.noise_std}")
        if not self.trait_coupling >= 0:
            raise ConfigError(f"synth.trait_coupling must be non-negative, got {self.trait_coupling}")
        if self.templates is None:
            if not 0 <= self.within < 1:
                raise ConfigError(f"synth.within must lie in [0, 1), got {self.within}")
            templates = default_templates(self.n_rois, self.within)
        else:
            templates = np.array(self.templates, dtype=np.float64)
        if templates.shape != (2, self.n_rois, self.n_rois):
            raise ConfigError(f"synth.templates must have shape (2, {self.n_rois}, {self.n_rois})")
        for s, t in enumerate(templates):
            if not np.allclose(t, t.T, atol=1e-12) or not np.allclose(np.diag(t), 1.0, atol=1e-12):
                raise ConfigError(f"template {s} is not a symmetric unit-diagonal correlation matrix")
        templates.flags.writeable = False
        object.__setattr__(self, "templates", templates)


@dataclass
class SynthDataset:
    scans: list
    states: dict
    config: SynthConfig

    def labels(self):
        return np.array([s.label for s in self.scans])


def correlated_noise(template, n_samples, rng):
    """``n_samples`` i.i.d. zero-mean rows with population correlation ``template``.

    Raises
    ------
    DataError
        If the template is not positive definite.
    """
    try:
        chol = np.linalg.cholesky(np.asarray(template, dtype=np.float64))
    except np.linalg.LinAlgError:
        raise DataError("correlation template is not positive definite") from None
    return rng.standard_normal((n_samples, chol.shape[0])) @ chol.T


def state_sequence(n_samples, dwell_means, rng):
    """Alternating two-state path with geometric dwell times."""
    states = np.empty(n_samples, dtype=np.int64)
    state = int(rng.integers(2))
    t = 0
    while t < n_samples:
        dwell = int(rng.geometric(1.0 / dwell_means[state]))
        states[t:t + dwell] = state
        t += dwell
        state = 1 - state
    return states


def trait_component(n_samples, n_rois, amplitude, rng):
    """Common factor on one random ROI module, scaled by ``amplitude * sqrt|u|``, ``u ~ U(-1, 1)``.

    The sign of ``u`` picks the module (first or second half of the ROIs).
    """
    u = rng.uniform(-1.0, 1.0)
    half = n_rois // 2
    loading = np.zeros(n_rois)
    loading[slice(0, half) if u > 0 else slice(half, n_rois)] = amplitude * np.sqrt(abs(u))
    return rng.standard_normal((n_samples, 1)) * loading


def generate_scan(group, config, rng, subject_id="sub-0", scan_id="scan-0"):
    """One scan of ``group``; returns the series and its latent state path."""
    if group not in LABEL_NAMES:
        raise ContractError(f"group must be {NC} (NC) or {MCI} (MCI), got {group!r}")
    n, length = config.n_rois, config.n_timepoints
    states = state_sequence(length, config.dwell_mean_by_group[group], rng)
    signal = np.empty((length, n))
    for s in (0, 1):
        rows = states == s
        signal[rows] = correlated_noise(config.templates[s], int(rows.sum()), rng)
    samples = (signal + trait_component(length, n, config.trait_coupling, rng)
               + config.noise_std * rng.standard_normal((length, n)))
    series = BoldSeries(subject_id, scan_id, int(group), samples)
    return series, states


def _check_windows(series, spec):
    x = series.samples
    if x.shape[0] < spec.length:
        return
    csum = np.vstack([np.zeros(x.shape[1]), np.cumsum(x, axis=0)])
    csq = np.vstack([np.zeros(x.shape[1]), np.cumsum(x * x, axis=0)])
    starts = window_starts(x.shape[0], spec)
    s1 = csum[starts + spec.length] - csum[starts]
    s2 = csq[starts + spec.length] - csq[starts]
    var = s2 / spec.length - (s1 / spec.length) ** 2
    if (var <= 1e-12).any():
        t, roi = np.argwhere(var <= 1e-12)[0]
        raise DataError(f"scan {series.scan_id}: ROI {roi} is constant in window {t}")


def generate_cohort(config, spec=WindowSpec()):
    """Balanced cohort; scan ``j`` of subject ``i`` gets its own derived seed."""
    n_sub = config.n_subjects_per_group
    children = np.random.SeedSequence(config.seed).spawn(2 * n_sub * config.scans_per_subject)
    scans, states = [], {}
    k = 0
    for group in (NC, MCI):
        for i in range(n_sub):
            subject = f"sub-{LABEL_NAMES[group].lower()}{i:03d}"
            for j in range(config.scans_per_subject):
                scan_id = f"{subject}_scan-{j}"
                series, path = generate_scan(group, config, np.random.default_rng(children[k]),
                                             subject, scan_id)
                _check_windows(series, spec)
                scans.append(series)
                states[scan_id] = path
                k += 1
    return SynthDataset(scans, states, config)
