"""Walk one synthetic scan from BOLD samples to transformer inputs.

Run with ``python3 demos/dfc_features.py``.
"""

import numpy as np

from dfcformer.dfc import LABEL_NAMES, WindowSpec, build_dfc, extract, window_count
from dfcformer.synthcohort import SynthConfig, generate_cohort


def main():
    spec = WindowSpec(length=70, stride=2)
    cohort = generate_cohort(SynthConfig(n_subjects_per_group=2), spec)
    print(f"{len(cohort.scans)} scans, {cohort.scans[0].samples.shape[1]} ROIs, "
          f"{cohort.scans[0].samples.shape[0]} time points each")
    print(f"windows per scan: {window_count(cohort.scans[0].samples.shape[0], spec)}")

    for series in cohort.scans:
        states = cohort.states[series.scan_id]
        switches = int((np.diff(states) != 0).sum())
        dfc = build_dfc(series, spec)
        feats = extract(series, spec).features
        spread = feats.temporal.var(axis=0).mean()
        print(f"{series.scan_id:22s} {LABEL_NAMES[series.label]:3s} state switches {switches:3d}  "
              f"dFC matrices {len(dfc.matrices)}  across-window node-strength variance {spread:.4f}")

    feats = extract(cohort.scans[0], spec).features
    print(f"temporal input {feats.temporal.shape} (windows x ROIs), "
          f"spatial input {feats.spatial.shape} (ROIs x windows)")


if __name__ == "__main__":
    main()
