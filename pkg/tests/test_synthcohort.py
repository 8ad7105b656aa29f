import numpy as np
import pytest

from dfcformer.dfc import MCI, NC, WindowSpec, extract, pearson_matrix
from dfcformer.exceptions import ConfigError, DataError
from dfcformer.synthcohort import (SynthConfig, correlated_noise, default_templates, generate_cohort,
                                   generate_scan, state_sequence)


@pytest.fixture(scope="module")
def default_cohort():
    spec = WindowSpec()
    cohort = generate_cohort(SynthConfig(), spec)
    return cohort, [extract(s, spec) for s in cohort.scans]


def best_threshold_accuracy(values, labels):
    best = 0.0
    for t in np.sort(values):
        pred = (values > t).astype(int)
        best = max(best, (pred == labels).mean(), (pred != labels).mean())
    return best


# --- correlated noise --------------------------------------------------------------------


def test_correlated_noise_examples():
    template = np.array([[1.0, 0.9], [0.9, 1.0]])
    x = correlated_noise(template, 2000, np.random.default_rng(0))
    assert 0.85 <= pearson_matrix(x)[0, 1] <= 0.95
    y = correlated_noise(np.eye(4), 2000, np.random.default_rng(1))
    off = pearson_matrix(y)[~np.eye(4, dtype=bool)]
    assert np.abs(off).max() < 0.1
    a = correlated_noise(template, 50, np.random.default_rng(7))
    b = correlated_noise(template, 50, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_non_positive_definite_template_is_rejected():
    with pytest.raises(DataError):
        correlated_noise(np.array([[1.0, 1.2], [1.2, 1.0]]), 10, np.random.default_rng(0))


def test_default_templates_are_correlation_matrices():
    t = default_templates(12, 0.9)
    for m in t:
        np.testing.assert_array_equal(m, m.T)
        np.testing.assert_array_equal(np.diag(m), 1.0)
        assert np.linalg.eigvalsh(m).min() > 0
    assert t[0][0, 5] == 0.9 and t[0][6, 11] == 0.0 and t[1][6, 11] == 0.9


# --- scans -------------------------------------------------------------------------------------


def test_state_sequence_dwell_means():
    rng = np.random.default_rng(3)
    path = state_sequence(200000, (8.0, 20.0), rng)
    change = np.flatnonzero(np.diff(path)) + 1
    runs = np.diff(np.concatenate([[0], change, [len(path)]]))
    states = path[np.concatenate([[0], change])]
    assert abs(runs[states == 0][1:-1].mean() - 8.0) < 0.5
    assert abs(runs[states == 1][1:-1].mean() - 20.0) < 1.0


def test_single_state_scan_recovers_template():
    config = SynthConfig(n_timepoints=2000, dwell_mean_by_group=((2000.0, 2000.0), (2000.0, 2000.0)),
                         noise_std=0.05, trait_coupling=0.0)
    for seed in range(50):
        series, states = generate_scan(NC, config, np.random.default_rng(seed))
        if (states == states[0]).all():
            break
    else:
        pytest.fail("no single-state scan among 50 seeds")
    fc = pearson_matrix(series.samples)
    # sampling error of a correlation at L=2000 is about 0.022
    np.testing.assert_allclose(fc, config.templates[states[0]], atol=0.1)


def _window_variance(dwell, n_scans=10, seed=4):
    config = SynthConfig(trait_coupling=0.0, dwell_mean_by_group=(dwell, dwell))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_scans):
        series, _ = generate_scan(NC, config, rng)
        out.append(extract(series, WindowSpec()).features.temporal.var(axis=0).mean())
    return np.mean(out)


def test_switching_near_window_scale_beats_no_switching():
    # a scan that never leaves its state has only sampling variance across windows
    assert _window_variance((70.0, 70.0)) > 2 * _window_variance((5000.0, 5000.0))


def test_switching_much_faster_than_window_averages_out():
    config = SynthConfig(trait_coupling=0.0)
    spec = WindowSpec()
    rng = np.random.default_rng(4)
    var = {NC: [], MCI: []}
    for group in (NC, MCI):
        for _ in range(10):
            series, _ = generate_scan(group, config, rng)
            var[group].append(extract(series, spec).features.temporal.var(axis=0).mean())
    assert np.mean(var[NC]) > np.mean(var[MCI])


def test_scan_determinism():
    config = SynthConfig()
    a, sa = generate_scan(MCI, config, np.random.default_rng(5))
    b, sb = generate_scan(MCI, config, np.random.default_rng(5))
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(sa, sb)


# --- cohorts -------------------------------------------------------------------------------------


def test_cohort_bookkeeping(default_cohort):
    cohort, _ = default_cohort
    labels = cohort.labels()
    assert (labels == NC).sum() == 30 and (labels == MCI).sum() == 30
    assert len({s.subject_id for s in cohort.scans}) == 60
    assert len({s.scan_id for s in cohort.scans}) == 60
    for s in cohort.scans:
        assert s.samples.shape == (200, 12)
        assert cohort.states[s.scan_id].shape == (200,)


def test_repeat_scans_share_subject_label():
    cohort = generate_cohort(SynthConfig(n_subjects_per_group=3, scans_per_subject=2, seed=1))
    by_subject = {}
    for s in cohort.scans:
        by_subject.setdefault(s.subject_id, set()).add(s.label)
    assert len(by_subject) == 6 and all(len(v) == 1 for v in by_subject.values())
    assert len(cohort.scans) == 12


def test_cohort_regeneration_is_identical():
    config = SynthConfig(n_subjects_per_group=4, seed=9)
    a, b = generate_cohort(config), generate_cohort(config)
    for x, y in zip(a.scans, b.scans):
        np.testing.assert_array_equal(x.samples, y.samples)
        np.testing.assert_array_equal(a.states[x.scan_id], b.states[y.scan_id])


def test_window_variance_oracle_separates_groups(default_cohort):
    cohort, feats = default_cohort
    scores = np.array([f.features.temporal.var(axis=0).mean() for f in feats])
    assert best_threshold_accuracy(scores, cohort.labels()) > 0.70


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(noise_std=0.0)
    with pytest.raises(ConfigError):
        SynthConfig(dwell_mean_by_group=((1.0, 5.0), (5.0, 5.0)))
    with pytest.raises(ConfigError):
        SynthConfig(n_rois=1)
    with pytest.raises(ConfigError):
        SynthConfig(n_rois=3, templates=np.ones((2, 3, 3)) * 2)
