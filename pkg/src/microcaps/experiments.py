"""Exclusion/augmentation experiment catalog, trial runner and statistics.

Each catalog entry names the rotation labels and perspective rings kept in
the training set (neutral is always kept) and whether augmentation should
synthesise the excluded rotations and/or perspectives. Evaluation always
uses the complete test split.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .geometry import RATIO_STATS, RING_ORDER, ROTATION_ORDER, ROTATION_STATS, AugmentPolicy, Ring, RotationLabel
from .network import MODEL_NAMES, ModelConfig, build_model, evaluate, train
from .synthgen import SampleSet

LW, LS, RS, RW = (RotationLabel.LEFT_WIDE, RotationLabel.LEFT_SHALLOW,
                  RotationLabel.RIGHT_SHALLOW, RotationLabel.RIGHT_WIDE)
NF, NN, PN, PF = Ring.NEGATIVE_FAR, Ring.NEGATIVE_NEAR, Ring.POSITIVE_NEAR, Ring.POSITIVE_FAR

# column order of the design tables
ROTATION_COLUMNS = (LW, LS, RS, RW)
RING_COLUMNS = (NF, NN, PN, PF)
MODELS = ("M1", "M2")


@dataclass(frozen=True)
class ExperimentSpec:
    id: str
    included_rotations: frozenset
    included_rings: frozenset
    augment_rotations: bool = False
    augment_perspectives: bool = False
    n_trials: int = 5

    def __post_init__(self):
        rots = frozenset(RotationLabel(r) for r in self.included_rotations) | {RotationLabel.NEUTRAL}
        rings = frozenset(Ring(r) for r in self.included_rings) | {Ring.NEUTRAL}
        object.__setattr__(self, "included_rotations", rots)
        object.__setattr__(self, "included_rings", rings)
        if self.n_trials < 0:
            raise ValueError("n_trials must be >= 0")

    @property
    def series(self) -> str:
        return "ALL" if self.id == "ALL" else self.id[0]

    @property
    def excluded_rotations(self) -> list[RotationLabel]:
        return [r for r in ROTATION_ORDER if r not in self.included_rotations]

    @property
    def excluded_rings(self) -> list[Ring]:
        return [r for r in RING_ORDER if r not in self.included_rings]

    @property
    def training_key(self) -> tuple:
        return (self.included_rotations, self.included_rings)

    def checkmarks(self) -> str:
        """Design-table row as a string: augment flags (A only), then 4 rotation and 4 ring columns."""
        marks = "".join("x" if r in self.included_rotations else "." for r in ROTATION_COLUMNS)
        marks += "".join("x" if r in self.included_rings else "." for r in RING_COLUMNS)
        if self.series == "E":
            return marks
        return ("x" if self.augment_rotations else ".") + ("x" if self.augment_perspectives else ".") + marks

    def with_trials(self, n: int) -> "ExperimentSpec":
        return ExperimentSpec(self.id, self.included_rotations, self.included_rings,
                              self.augment_rotations, self.augment_perspectives, n)


_ALL_ROT = (LW, LS, RS, RW)
_SHALLOW = (LS, RS)
_ALL_RING = (NF, NN, PN, PF)
_NEAR = (NN, PN)


def _spec(id_, rots, rings, aug_r=False, aug_p=False) -> ExperimentSpec:
    return ExperimentSpec(id_, frozenset(rots), frozenset(rings), aug_r, aug_p)


CATALOG: dict[str, ExperimentSpec] = {
    s.id: s
    for s in [
        _spec("E1", _ALL_ROT, _ALL_RING),
        _spec("E2", _ALL_ROT, _NEAR),
        _spec("E3", _ALL_ROT, ()),
        _spec("E4", _SHALLOW, _ALL_RING),
        _spec("E5", _SHALLOW, _NEAR),
        _spec("E6", _SHALLOW, ()),
        _spec("E7", (), _ALL_RING),
        _spec("E8", (), _NEAR),
        _spec("E9", (), ()),
        _spec("A1", _ALL_ROT, _NEAR, aug_p=True),
        _spec("A2", _ALL_ROT, (), aug_p=True),
        _spec("A3", _SHALLOW, _ALL_RING, aug_r=True),
        _spec("A4", _SHALLOW, _NEAR, aug_r=True, aug_p=True),
        _spec("A5", _SHALLOW, _NEAR, aug_r=True),
        _spec("A6", _SHALLOW, _NEAR, aug_p=True),
        _spec("A7", _SHALLOW, (), aug_r=True, aug_p=True),
        _spec("A8", _SHALLOW, (), aug_r=True),
        _spec("A9", _SHALLOW, (), aug_p=True),
        _spec("A10", (), _ALL_RING, aug_r=True),
        _spec("A11", (), _NEAR, aug_r=True, aug_p=True),
        _spec("A12", (), _NEAR, aug_r=True),
        _spec("A13", (), _NEAR, aug_p=True),
        _spec("A14", (), (), aug_r=True, aug_p=True),
        _spec("A15", (), (), aug_r=True),
        _spec("A16", (), (), aug_p=True),
        _spec("ALL", _ALL_ROT, _ALL_RING, aug_r=True, aug_p=True),
    ]
}


class UnknownSpecError(KeyError):
    def __str__(self):
        return f"unknown experiment id {self.args[0]!r}; valid ids are E1-E9, A1-A16 and ALL"


def get_spec(spec_id: str) -> ExperimentSpec:
    try:
        return CATALOG[spec_id.upper()]
    except KeyError:
        raise UnknownSpecError(spec_id) from None


def counterparts(spec_id: str) -> list[str]:
    """A-series ids trained on the same subset as an E-series id (E5 -> A4, A5, A6)."""
    key = get_spec(spec_id).training_key
    return [s.id for s in CATALOG.values() if s.series == "A" and s.training_key == key]


# ---------------------------------------------------------------------------
# splits and augmentation policy


def train_mask(dataset: SampleSet, spec: ExperimentSpec) -> np.ndarray:
    rot_ok = np.isin(dataset.rotation, [ROTATION_ORDER.index(r) for r in spec.included_rotations])
    ring_ok = np.array([r in spec.included_rings for r in dataset.rings], dtype=bool)
    return (dataset.split == "train") & rot_ok & ring_ok


def build_split(dataset: SampleSet, spec: ExperimentSpec) -> SampleSet:
    """Training samples whose rotation label and ring are both included."""
    mask = train_mask(dataset, spec)
    if not mask.any():
        raise ValueError(f"{spec.id}: no training samples left after exclusions")
    return dataset.subset(mask)


def _pooled(values) -> float:
    return math.sqrt(sum(v * v for v in values) / len(values))


def augment_policy(spec: ExperimentSpec) -> AugmentPolicy:
    """Translation jitter always; rotation/perspective spreads per the experiment's flags.

    With nothing excluded (the ALL run) each sample uses its own label's
    spread. Otherwise every sample draws from the pooled spread of the
    excluded labels, root-mean-square over those labels.
    """
    rot_sd = {k: v[2] for k, v in ROTATION_STATS.items()}
    ring_sd = {k: v[2] for k, v in RATIO_STATS.items()}
    if spec.augment_rotations and spec.excluded_rotations:
        s = _pooled([ROTATION_STATS[r][2] for r in spec.excluded_rotations])
        rot_sd = {k: s for k in rot_sd}
    if spec.augment_perspectives and spec.excluded_rings:
        s = _pooled([RATIO_STATS[r][2] for r in spec.excluded_rings])
        ring_sd = {k: s for k in ring_sd}
    return AugmentPolicy(rotation_sd=rot_sd, perspective_sd=ring_sd,
                         simulate_rotations=spec.augment_rotations,
                         simulate_perspectives=spec.augment_perspectives)


# ---------------------------------------------------------------------------
# trials


@dataclass
class TrialResult:
    spec_id: str
    model: str
    trial: int
    seed: int
    accuracy: float
    wall_time_s: float
    confusion: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class TrainSettings:
    model: ModelConfig = ModelConfig()
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3


def run_trial(spec: ExperimentSpec, model_name: str, trial: int, seed: int, train_set: SampleSet,
              test_set: SampleSet, settings: TrainSettings) -> TrialResult:
    t0 = time.perf_counter()
    cfg = settings.model.with_head(MODEL_NAMES[model_name])
    model = build_model(cfg, seed)
    train(model, train_set, augment_policy(spec), settings.epochs, settings.batch_size, seed, settings.lr)
    ev = evaluate(model, test_set)
    return TrialResult(spec.id, model_name, trial, seed, ev.accuracy, time.perf_counter() - t0, ev.confusion)


_WORKER_DATA: dict = {}


def _init_worker(dataset):
    _WORKER_DATA["dataset"] = dataset


def _trial_job(args):
    spec, model_name, trial, seed, settings = args
    dataset = _WORKER_DATA["dataset"]
    return run_trial(spec, model_name, trial, seed, build_split(dataset, spec), dataset.split_of("test"), settings)


def run_experiment(spec: ExperimentSpec, dataset: SampleSet, base_seed: int, model: str = "M2",
                   settings: TrainSettings | None = None) -> list[TrialResult]:
    """``spec.n_trials`` independent trainings with seeds base_seed + i."""
    return run_many([(spec, model)], dataset, base_seed, settings, workers=1)


def run_many(jobs, dataset: SampleSet, base_seed: int, settings: TrainSettings | None = None,
             workers: int | None = None, progress=None) -> list[TrialResult]:
    """Run every trial of every (spec, model) pair; results sorted by (spec, model, trial).

    Trials are independent, so they may be spread over ``workers`` processes
    without changing any result.
    """
    settings = settings or TrainSettings()
    tasks = [(spec, m, i, base_seed + i, settings) for spec, m in jobs for i in range(spec.n_trials)]
    if not tasks:
        return []
    workers = max(1, min(workers or os.cpu_count() or 1, len(tasks)))
    results = []
    if workers == 1:
        _init_worker(dataset)
        try:
            for t in tasks:
                r = _trial_job(t)
                results.append(r)
                if progress:
                    progress(r)
        finally:
            _WORKER_DATA.clear()
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(dataset,)) as pool:
            for r in pool.map(_trial_job, tasks):
                results.append(r)
                if progress:
                    progress(r)
    order = {s.id: k for k, s in enumerate(CATALOG.values())}
    results.sort(key=lambda r: (order.get(r.spec_id, len(order)), r.spec_id, r.model, r.trial))
    return results


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p_value: float
    degenerate: bool = False


def welch(a, b) -> WelchResult:
    """Two-sided Welch unequal-variance t-test with Welch-Satterthwaite degrees of freedom.

    When both samples have zero variance the statistic is undefined: equal
    means give p = 1, different means give p = 0 with ``degenerate`` set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"Welch test needs at least two values per sample, got {a.size} and {b.size}")
    ma, mb = a.mean(), b.mean()
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0.0:
        if ma == mb:
            return WelchResult(0.0, math.nan, 1.0, True)
        return WelchResult(math.copysign(math.inf, ma - mb), math.nan, 0.0, True)
    t = (ma - mb) / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = 2.0 * special.stdtr(df, -abs(t))
    return WelchResult(float(t), float(df), float(min(1.0, p)))


def welch_t_test(a, b) -> float:
    return welch(a, b).p_value


@dataclass(frozen=True)
class ModelStats:
    mean: float
    max: float
    sd: float
    n: int


@dataclass(frozen=True)
class ComparisonReport:
    m1: ModelStats
    m2: ModelStats
    p_value: float  # nan when either side has fewer than two trials
    degenerate: bool = False


def model_stats(accuracies) -> ModelStats:
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("no results to summarise")
    sd = float(acc.std(ddof=1)) if acc.size > 1 else 0.0
    return ModelStats(float(acc.mean()), float(acc.max()), sd, int(acc.size))


def _accuracies(results) -> list[float]:
    return [r.accuracy if isinstance(r, TrialResult) else float(r) for r in results]


def summarize(results_m1, results_m2) -> ComparisonReport:
    a, b = _accuracies(results_m1), _accuracies(results_m2)
    s1, s2 = model_stats(a), model_stats(b)
    if len(a) < 2 or len(b) < 2:
        return ComparisonReport(s1, s2, math.nan)
    w = welch(a, b)
    return ComparisonReport(s1, s2, w.p_value, w.degenerate)


# ---------------------------------------------------------------------------
# output files

RESULTS_FIELDS = ["spec_id", "model", "trial", "seed", "accuracy", "wall_time_s"]
SUMMARY_FIELDS = ["spec_id", "model", "mean", "max", "sd", "p_value_vs_other_model"]


def _f6(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def _fp(p: float) -> str:
    # p-values can be far below 1e-6, so keep them in scientific notation
    return "" if p is None or math.isnan(p) else f"{p:.6e}"


def group_results(results: list[TrialResult]) -> dict[str, dict[str, list[TrialResult]]]:
    out: dict[str, dict[str, list[TrialResult]]] = {}
    for r in results:
        out.setdefault(r.spec_id, {}).setdefault(r.model, []).append(r)
    return out


def write_results_csv(results: list[TrialResult], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_FIELDS)
        for r in results:
            w.writerow([r.spec_id, r.model, r.trial, r.seed, _f6(r.accuracy), f"{r.wall_time_s:.3f}"])
    return path


def summary_rows(results: list[TrialResult]) -> list[list[str]]:
    rows = []
    for spec_id, by_model in group_results(results).items():
        p = math.nan
        if "M1" in by_model and "M2" in by_model:
            p = summarize(by_model["M1"], by_model["M2"]).p_value
        for m in MODELS:
            if m in by_model:
                st = model_stats(_accuracies(by_model[m]))
                rows.append([spec_id, m, _f6(st.mean), _f6(st.max), _f6(st.sd), _fp(p)])
    return rows


def write_summary_csv(results: list[TrialResult], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        w.writerows(summary_rows(results))
    return path


def read_results_csv(path) -> list[TrialResult]:
    with open(path, newline="") as fh:
        return [
            TrialResult(row["spec_id"], row["model"], int(row["trial"]), int(row["seed"]),
                        float(row["accuracy"]), float(row["wall_time_s"]))
            for row in csv.DictReader(fh)
        ]


def _pct(st: ModelStats | None) -> str:
    return f"{100 * st.mean:7.2f}%" if st else "       -"


def format_report(results: list[TrialResult]) -> str:
    """Plain-text tables: E series, A series, E against A, and the ALL run."""
    grouped = group_results(results)
    stats = {
        (sid, m): model_stats(_accuracies(rs)) for sid, by_model in grouped.items() for m, rs in by_model.items()
    }
    lines = []

    def model_table(title, ids):
        ids = [i for i in ids if i in grouped]
        if not ids:
            return
        lines.append(title)
        lines.append(f"{'id':<5} {'M1 mean':>8} {'M1 max':>8} {'M1 sd':>8} {'M2 mean':>8} {'M2 max':>8} "
                     f"{'M2 sd':>8} {'p-value':>12}")
        for sid in ids:
            cells = []
            for m in MODELS:
                st = stats.get((sid, m))
                cells += [f"{100 * st.mean:7.2f}%", f"{100 * st.max:7.2f}%", f"{st.sd:8.5f}"] if st else ["-"] * 3
            p = math.nan
            if (sid, "M1") in stats and (sid, "M2") in stats:
                p = summarize(grouped[sid]["M1"], grouped[sid]["M2"]).p_value
            lines.append(f"{sid:<5} " + " ".join(f"{c:>8}" for c in cells) + f" {_fp(p) or '-':>12}")
        lines.append("")

    model_table("Exclusion experiments (no augmentation)", [s for s in CATALOG if s.startswith("E")])
    model_table("Exclusion experiments with augmentation of the excluded views",
                [s for s in CATALOG if s.startswith("A")])

    pairs = [(e, a) for e in CATALOG if e.startswith("E") for a in counterparts(e) if e in grouped and a in grouped]
    if pairs:
        lines.append("Same training subset, without (E) and with (A) augmentation")
        lines.append(f"{'E':<4} {'M1':>8} {'M2':>8}   {'A':<4} {'M1':>8} {'M2':>8} {'p M1':>12} {'p M2':>12}")
        for e, a in pairs:
            ps = []
            for m in MODELS:
                if m in grouped[e] and m in grouped[a] and len(grouped[e][m]) > 1 and len(grouped[a][m]) > 1:
                    ps.append(_fp(welch_t_test(_accuracies(grouped[e][m]), _accuracies(grouped[a][m]))))
                else:
                    ps.append("-")
            lines.append(f"{e:<4} {_pct(stats.get((e, 'M1')))} {_pct(stats.get((e, 'M2')))}   {a:<4} "
                         f"{_pct(stats.get((a, 'M1')))} {_pct(stats.get((a, 'M2')))} {ps[0]:>12} {ps[1]:>12}")
        lines.append("")

    if "ALL" in grouped:
        lines.append("All training data with rotation and perspective augmentation")
        lines.append(f"{'model':<6} {'mean':>8} {'max':>8} {'sd':>8}")
        for m in MODELS:
            st = stats.get(("ALL", m))
            if st:
                lines.append(f"{m:<6} {100 * st.mean:7.2f}% {100 * st.max:7.2f}% {st.sd:8.5f}")
        by_model = grouped["ALL"]
        if "M1" in by_model and "M2" in by_model:
            rep = summarize(by_model["M1"], by_model["M2"])
            lines.append(f"p-value {_fp(rep.p_value) or '-'}; M2 - M1 = {100 * (rep.m2.mean - rep.m1.mean):+.2f} points")
        lines.append("")
    return "\n".join(lines)


def emit_table(results: list[TrialResult], out_dir) -> dict[str, Path]:
    """Write results.csv, summary.csv and report.txt into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": write_results_csv(results, out / "results.csv"),
        "summary": write_summary_csv(results, out / "summary.csv"),
        "report": out / "report.txt",
    }
    paths["report"].write_text(format_report(results))
    return paths
