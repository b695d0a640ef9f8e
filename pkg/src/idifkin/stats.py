"""Fit-quality metrics and the paired cohort comparison (exact Wilcoxon)."""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import _kernels

logger = logging.getLogger(__name__)

COHORT_COLUMNS = ("subject_id", "organ", "mse_baseline", "mse_multi")
MAX_ENUMERATION_N = 25


@dataclass(frozen=True)
class PairedSubject:
    subject_id: str
    mse_baseline: float
    mse_multi: float

    def __post_init__(self):
        for value in (self.mse_baseline, self.mse_multi):
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{self.subject_id}: MSE values must be finite and >= 0")


@dataclass(frozen=True)
class PairedCohort:
    organ: str
    subjects: tuple

    def __post_init__(self):
        if len(self.subjects) < 1:
            raise ValueError("a cohort needs at least one subject")

    @property
    def baseline(self):
        return np.array([s.mse_baseline for s in self.subjects])

    @property
    def multi(self):
        return np.array([s.mse_multi for s in self.subjects])

    def __len__(self):
        return len(self.subjects)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    pvalue: float
    n: int
    n_patterns: int


def mse(predicted, measured):
    """Mean over frames of the squared difference (kBq^2/ml^2)."""
    if predicted.grid != measured.grid:
        raise ValueError("curves are on different frame grids")
    diff = predicted.values - measured.values
    return float(np.mean(diff * diff))


def relative_change(baseline, multi):
    """Percent change ``100 * (multi - baseline) / baseline``."""
    if baseline == 0:
        raise ValueError("relative change is undefined for a zero baseline")
    return 100.0 * (multi - baseline) / baseline


def cohort_summary(values):
    """Mean and sample standard deviation (``n - 1``); sd is NaN for one value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot summarise an empty list")
    mean = math.fsum(values) / values.size
    if values.size < 2:
        return mean, float("nan")
    sd = math.sqrt(math.fsum((values - mean) ** 2) / (values.size - 1))
    return mean, sd


def _null_count_dp(ranks2, w2_obs):
    # subset-sum counts over doubled ranks; exact for any n
    total = int(np.sum(ranks2))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        counts[r:] = counts[r:] + counts[: total + 1 - r]
    w_plus = np.arange(total + 1)
    hit = np.minimum(w_plus, total - w_plus) <= w2_obs
    return int(np.sum(counts[hit]))


def wilcoxon_signed_rank(differences):
    """Exact two-sided Wilcoxon signed-rank test.

    Zero differences are dropped; tied ``|d|`` share their average rank. The
    statistic is ``W = min(W+, W-)`` and the p-value is the share of the
    ``2**n`` sign patterns whose statistic is ``<= W``, found by enumerating
    them for ``n <= 25`` and by exact subset-sum counting beyond.

    Parameters
    ----------
    differences : array_like or PairedCohort
        Paired differences, or a cohort (``multi - baseline`` is used).
    """
    if isinstance(differences, PairedCohort):
        differences = differences.multi - differences.baseline
    d = np.asarray(differences, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("differences must be finite")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all differences are zero")
    ranks2 = np.rint(2.0 * rankdata(np.abs(d))).astype(np.int64)
    w2_plus = int(ranks2[d > 0].sum())
    w2_minus = int(ranks2[d < 0].sum())
    w2 = min(w2_plus, w2_minus)
    if n <= MAX_ENUMERATION_N:
        count = _kernels.signed_rank_null_count(ranks2, w2)
    else:
        count = _null_count_dp(ranks2, w2)
    n_patterns = 1 << n
    return WilcoxonResult(w2 / 2.0, min(1.0, count / n_patterns), n, n_patterns)


# --------------------------------------------------------------------------
# Cohort tables
# --------------------------------------------------------------------------


def read_cohort_csv(path):
    """``{organ: PairedCohort}`` from a ``subject_id,organ,mse_baseline,mse_multi`` CSV."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COHORT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            subject = PairedSubject(
                row["subject_id"], float(row["mse_baseline"]), float(row["mse_multi"])
            )
            rows.setdefault(row["organ"], []).append(subject)
    return {organ: PairedCohort(organ, tuple(subjects)) for organ, subjects in rows.items()}


def write_cohort_csv(path, cohorts):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COHORT_COLUMNS)
        for organ, cohort in cohorts.items():
            for s in cohort.subjects:
                writer.writerow([s.subject_id, organ, repr(s.mse_baseline), repr(s.mse_multi)])


def summarize_cohort(cohort):
    """Per-organ row of the MSE comparison table."""
    base = cohort.baseline
    multi = cohort.multi
    changes = [relative_change(b, m) for b, m in zip(base, multi)]
    row = {"organ": cohort.organ, "n": len(cohort)}
    for key, values in (("mse_baseline", base), ("mse_multi", multi), ("relative_change_pct", changes)):
        mean, sd = cohort_summary(values)
        row[key] = {"mean": mean, "sd": None if math.isnan(sd) else sd}
    if len(cohort) < 2:
        logger.warning("%s: one subject, standard deviations omitted", cohort.organ)
    try:
        test = wilcoxon_signed_rank(cohort)
        row["wilcoxon"] = {"W": test.statistic, "p": test.pvalue, "n_nonzero": test.n}
    except ValueError as exc:
        logger.warning("%s: Wilcoxon test skipped (%s)", cohort.organ, exc)
        row["wilcoxon"] = None
    return row


def _pm(stat, fmt, suffix=""):
    if stat["sd"] is None:
        return f"{stat['mean']:{fmt}}{suffix}"
    return f"{stat['mean']:{fmt}}{suffix} ± {stat['sd']:{fmt}}{suffix}"


def format_table(rows, alpha=0.05):
    """Plain-text table: organ, both MSEs, relative change and p-value."""
    header = ("Organ", "MSE (aorta)", "MSE (multiple)", "Relative change", "p-value")
    lines = []
    for row in rows:
        test = row["wilcoxon"]
        if test is None:
            p_text = "n/a"
        else:
            p_text = f"{test['p']:.5f}" + ("*" if test["p"] < alpha else "")
        lines.append(
            (
                row["organ"],
                _pm(row["mse_baseline"], ".2f"),
                _pm(row["mse_multi"], ".2f"),
                _pm(row["relative_change_pct"], ".2f", "%"),
                p_text,
            )
        )
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    out = [" | ".join(h.ljust(w) for h, w in zip(header, widths))]
    out.append("-+-".join("-" * w for w in widths))
    out.extend(" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in lines)
    return "\n".join(out) + "\n"
