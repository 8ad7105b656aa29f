"""On-disk formats: scan tables, manifests, run configs and results.

* Scan file: comma-separated, header row of ROI names, one row per time point.
* Manifest: JSON list of ``{"subject_id", "scan_id", "label", "path"}`` with
  ``label`` in ``{"NC", "MCI"}`` and ``path`` relative to the manifest.
* Run config: JSON object with optional sections ``synth``, ``window``,
  ``model``, ``train`` and ``eval``. Unknown keys are rejected.
* Results: JSON with the config echo, seeds, per-fold metrics and aggregates.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dfc import LABEL_CODES, LABEL_NAMES, BoldSeries, WindowSpec
from .exceptions import ConfigError, DataError, DfcError
from .model import ModelConfig, normalize_variant
from .synthcohort import SynthConfig
from .training import TrainConfig


# ---------------------------------------------------------------------------
# scans and manifests
# ---------------------------------------------------------------------------


def write_scan(path, series):
    header = ",".join(series.roi_names)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        np.savetxt(fh, series.samples, fmt="%.17g", delimiter=",", header=header, comments="")


def read_scan(path, subject_id, scan_id, label):
    try:
        with open(path, encoding="utf-8") as fh:
            names = fh.readline().strip().split(",")
            samples = np.loadtxt(fh, delimiter=",", ndmin=2)
    except FileNotFoundError:
        raise DataError(f"scan file not found: {path}") from None
    except ValueError as err:
        raise DataError(f"scan file {path} is malformed: {err}") from None
    if samples.shape[1] != len(names):
        raise DataError(f"scan file {path}: {len(names)} header names but {samples.shape[1]} columns")
    return BoldSeries(subject_id, scan_id, label, samples, tuple(names))


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(entries, fh, indent=2)
        fh.write("\n")


def read_manifest(path):
    """Parse a manifest and return entries with paths resolved against its directory."""
    try:
        with open(path, encoding="utf-8") as fh:
            entries = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as err:
        raise DataError(f"manifest {path} is not valid JSON: {err}") from None
    if not isinstance(entries, list) or not entries:
        raise DataError(f"manifest {path} must be a non-empty list")
    base = os.path.dirname(os.path.abspath(path))
    out, seen = [], set()
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or set(e) != {"subject_id", "scan_id", "label", "path"}:
            raise DataError(f"manifest entry {i} must have exactly subject_id, scan_id, label, path")
        if e["label"] not in LABEL_CODES:
            raise DataError(f"manifest entry {i}: label must be NC or MCI, got {e['label']!r}")
        if e["scan_id"] in seen:
            raise DataError(f"manifest entry {i}: duplicate scan_id {e['scan_id']!r}")
        seen.add(e["scan_id"])
        out.append({**e, "path": os.path.join(base, e["path"])})
    return out


def load_manifest_scans(path):
    return [read_scan(e["path"], e["subject_id"], e["scan_id"], LABEL_CODES[e["label"]])
            for e in read_manifest(path)]


def write_cohort(out_dir, dataset):
    """Write one CSV per scan under ``out_dir/scans`` plus ``out_dir/manifest.json``."""
    scan_dir = os.path.join(out_dir, "scans")
    try:
        os.makedirs(scan_dir, exist_ok=True)
    except OSError as err:
        raise DataError(f"cannot create output directory {out_dir}: {err}") from None
    entries = []
    for series in dataset.scans:
        rel = os.path.join("scans", f"{series.scan_id}.csv")
        write_scan(os.path.join(out_dir, rel), series)
        entries.append({"subject_id": series.subject_id, "scan_id": series.scan_id,
                        "label": LABEL_NAMES[series.label], "path": rel})
    manifest = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, entries)
    return manifest


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    folds: int = 5
    seed: int = 0
    variant: str = "full"
    ablate: bool = False

    def __post_init__(self):
        if not isinstance(self.folds, int) or self.folds < 2:
            raise ConfigError(f"eval.folds must be an integer >= 2, got {self.folds!r}")
        object.__setattr__(self, "variant", normalize_variant(self.variant))


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    window: WindowSpec = field(default_factory=WindowSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def echo(self):
        """Plain-data view of every setting, for results files."""
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            if f.name == "synth":
                section["templates"] = np.asarray(section["templates"]).tolist()
                section["dwell_mean_by_group"] = [list(g) for g in section["dwell_mean_by_group"]]
            out[f.name] = section
        return out


_CLASSES = {"synth": SynthConfig, "window": WindowSpec, "model": ModelConfig,
            "train": TrainConfig, "eval": EvalConfig}


def parse_config(doc):
    """Build a :class:`RunConfig` from a dict, rejecting unknown sections and keys."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(_CLASSES)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name, cls in _CLASSES.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        allowed = {f.name for f in dataclasses.fields(cls)}
        bad = set(values) - allowed
        if bad:
            raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(sorted(bad))}")
        try:
            sections[name] = cls(**values)
        except DfcError as err:
            raise ConfigError(f"{name}: {err}") from None
        except TypeError as err:
            raise ConfigError(f"{name}: {err}") from None
    return RunConfig(**sections)


def load_config(path):
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    return parse_config(doc)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

RESULTS_FORMAT = "dfcformer-results/1"


def results_document(config, results, manifest=None):
    """Assemble the results JSON object from ``{variant: CVResult}``."""
    variants = {}
    for name, cv in results.items():
        variants[name] = {
            "mean": cv.mean,
            "std": cv.std,
            "folds": [{
                "fold": f.fold,
                "seed": f.seed,
                "metrics": f.metrics.as_dict(),
                "train_subjects": f.train_subjects,
                "test_subjects": f.test_subjects,
                "test_scans": f.test_scans,
                "logits": f.logits,
                "history": f.history,
            } for f in cv.folds],
        }
    doc = {"format": RESULTS_FORMAT, "config": config.echo(),
           "seeds": {"eval": config.eval.seed, "folds": {n: [f.seed for f in cv.folds]
                                                         for n, cv in results.items()}},
           "variants": variants}
    if manifest is not None:
        doc["manifest"] = os.path.basename(manifest)
    return doc


def write_results(path, doc):
    """Write atomically so a failed run never leaves a partial file behind."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
