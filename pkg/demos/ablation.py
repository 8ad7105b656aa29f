"""Cross-validate the four model variants on a synthetic cohort.

Run with ``python3 demos/ablation.py [n_subjects_per_group]``. The default of
10 subjects per group finishes in about a minute; 30 matches the acceptance
setting and takes a few minutes.
"""

import sys

from dfcformer.dfc import WindowSpec, extract
from dfcformer.evaluation import run_ablation
from dfcformer.model import ModelConfig
from dfcformer.synthcohort import SynthConfig, generate_cohort
from dfcformer.training import TrainConfig


def main(n_per_group=10):
    spec = WindowSpec()
    cohort = generate_cohort(SynthConfig(n_subjects_per_group=n_per_group), spec)
    scans = [extract(s, spec) for s in cohort.scans]

    def progress(variant, fold):
        print(f"  {variant:7s} fold {fold.fold}: acc {fold.metrics.acc:.3f}", flush=True)

    results = run_ablation(scans, ModelConfig(), TrainConfig(lr=1e-3), k=5, seed=0, progress=progress)
    print(f"{'Method':8s} {'ACC':>6s} {'AUC':>6s}")
    for name, cv in results.items():
        print(f"{name:8s} {cv.mean['acc']:6.3f} {cv.mean['auc']:6.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 10)
