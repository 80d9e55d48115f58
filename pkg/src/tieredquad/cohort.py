"""Synthetic two-tier lesion cohorts and dataset plumbing.

A cohort is a flat list of lesion samples. Each synthetic patient gets
a phenotype center; normal lesions are noisy copies of that center and
the patient's rare "ugly duckling" (ud) lesions sit at a patient-specific
offset from it. The offset direction and magnitude vary per patient, so
the margin that separates the two classes is itself patient-specific,
while the global class imbalance mirrors a 1:32 clinical ratio.

Splits are by patient, never by sample, so no patient's lesions can leak
across train/validation/test.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LABELS",
    "LesionSample",
    "GeneratorConfig",
    "SplitSpec",
    "CohortError",
    "generate_cohort",
    "split_by_patient",
    "oversample_minority",
    "save_cohort",
    "load_cohort",
    "inspect_cohort",
]

LABELS = ("normal", "ud")


class CohortError(ValueError):
    pass


@dataclass
class LesionSample:
    patient_id: str
    lesion_id: str
    label: str
    features: np.ndarray
    replica: int = 0  # >0 only on oversampling duplicates

    def __post_init__(self):
        if self.label not in LABELS:
            raise CohortError(f"unknown label {self.label!r}")
        self.features = np.asarray(self.features, dtype=np.float64)
        if not np.all(np.isfinite(self.features)):
            raise CohortError(
                f"non-finite features for {self.patient_id}/{self.lesion_id}")


@dataclass(frozen=True)
class GeneratorConfig:
    """Geometry of the synthetic cohort.

    ud_direction_coherence is the fraction of patients whose offset
    direction carries a cohort-wide component (their direction mixes
    0.7 shared + 0.3 patient-random); the remaining patients' offsets
    point in fully random directions. This keeps the two lesion classes
    partially mutual across patients (there is something transferable
    for a lesion-level classifier to learn) while the appearance of the
    ud class still changes from patient to patient.
    """

    n_patients: int = 37
    lesions_per_patient: tuple[int, int] = (100, 400)
    ud_fraction: float = 1.0 / 33.0
    feature_dim: int = 16
    center_spread: float = 0.3
    noise: float = 0.05
    ud_offset: tuple[float, float] = (0.25, 6.0)
    ud_direction_coherence: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise CohortError("n_patients must be positive")
        lo, hi = self.lesions_per_patient
        if not (1 <= lo <= hi):
            raise CohortError(f"bad lesions_per_patient range ({lo}, {hi})")
        if not (0.0 < self.ud_fraction < 0.5):
            raise CohortError("ud_fraction must be in (0, 0.5)")
        if self.feature_dim < 1:
            raise CohortError("feature_dim must be positive")
        if self.center_spread <= 0 or self.noise <= 0:
            raise CohortError("spread parameters must be positive")
        m_lo, m_hi = self.ud_offset
        if not (0.0 < m_lo < m_hi):
            raise CohortError(f"bad ud_offset range ({m_lo}, {m_hi})")
        if not (0.0 <= self.ud_direction_coherence <= 1.0):
            raise CohortError("ud_direction_coherence must be in [0, 1]")


@dataclass
class SplitSpec:
    train: list[str]
    validation: list[str]
    test: list[str]
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def subset(self, cohort, which: str):
        ids = set(getattr(self, which))
        return [s for s in cohort if s.patient_id in ids]


def generate_cohort(config: GeneratorConfig, return_centers: bool = False):
    """Draw a full synthetic cohort; deterministic per config.seed.

    Every patient receives at least one ud lesion, and the per-patient
    ud count is round(lesions * ud_fraction), which keeps the achieved
    global imbalance within a few percent of the target. With
    return_centers the phenotype centers are also returned (for
    geometry checks), as {patient_id: center}.
    """
    rng = np.random.default_rng(config.seed)
    dim = config.feature_dim
    lo, hi = config.lesions_per_patient
    m_lo, m_hi = config.ud_offset
    kappa = config.ud_direction_coherence
    shared = rng.normal(size=dim)
    shared /= np.linalg.norm(shared)
    width = max(3, len(str(config.n_patients)))
    cohort: list[LesionSample] = []
    centers: dict[str, np.ndarray] = {}
    for ix in range(config.n_patients):
        pid = f"P{ix + 1:0{width}d}"
        n_lesions = int(rng.integers(lo, hi + 1))
        n_ud = max(1, int(round(n_lesions * config.ud_fraction)))
        center = rng.normal(0.0, config.center_spread, size=dim)
        centers[pid] = center
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        if rng.random() < kappa:
            direction = 0.7 * shared + 0.3 * direction
            direction /= np.linalg.norm(direction)
        magnitude = rng.uniform(m_lo, m_hi)
        ud_slots = set(rng.choice(n_lesions, size=n_ud, replace=False).tolist())
        for li in range(n_lesions):
            noise = rng.normal(0.0, config.noise, size=dim)
            if li in ud_slots:
                feats = center + magnitude * direction + noise
                label = "ud"
            else:
                feats = center + noise
                label = "normal"
            cohort.append(LesionSample(pid, f"{pid}-L{li:04d}", label, feats))
    if return_centers:
        return cohort, centers
    return cohort


def _split_sizes(n: int, fractions) -> list[int]:
    fractions = tuple(fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or \
            abs(sum(fractions) - 1.0) > 1e-9:
        raise CohortError(f"fractions must be three positives summing to 1, got {fractions}")
    raw = [f * n for f in fractions]
    sizes = [math.floor(r) for r in raw]
    remainders = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(3):  # every split nonempty
        while sizes[i] == 0:
            j = int(np.argmax(sizes))
            sizes[j] -= 1
            sizes[i] += 1
    return sizes


def split_by_patient(cohort, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> SplitSpec:
    """Random patient partition; resampled until every split holds at
    least one patient with a ud sample (at most 100 tries)."""
    patients = sorted({s.patient_id for s in cohort})
    if len(patients) < 3:
        raise CohortError(f"need >= 3 patients to split, got {len(patients)}")
    has_ud = {pid: False for pid in patients}
    for s in cohort:
        if s.label == "ud":
            has_ud[s.patient_id] = True
    sizes = _split_sizes(len(patients), fractions)
    rng = np.random.default_rng(seed)
    for _ in range(100):
        order = list(rng.permutation(patients))
        train = sorted(order[: sizes[0]])
        val = sorted(order[sizes[0]: sizes[0] + sizes[1]])
        test = sorted(order[sizes[0] + sizes[1]:])
        if all(any(has_ud[p] for p in part) for part in (train, val, test)):
            return SplitSpec(train, val, test, tuple(fractions))
    raise CohortError("could not place a ud-carrying patient in every split")


def oversample_minority(train_samples, factor: int = 10) -> list[LesionSample]:
    """Duplicate every ud sample `factor` times (replica-indexed);
    normals pass through once. Features are shared, never copied."""
    if factor < 1:
        raise CohortError("oversampling factor must be >= 1")
    out: list[LesionSample] = []
    for s in train_samples:
        if s.label == "ud":
            for r in range(factor):
                out.append(LesionSample(s.patient_id, s.lesion_id, s.label,
                                        s.features, replica=r))
        else:
            out.append(s)
    return out


def save_cohort(cohort, path) -> None:
    """One JSON object per line; decimal encoding round-trips exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in cohort:
            fh.write(json.dumps({
                "patient_id": s.patient_id,
                "lesion_id": s.lesion_id,
                "label": s.label,
                "features": s.features.tolist(),
            }, sort_keys=True))
            fh.write("\n")


def load_cohort(path) -> list[LesionSample]:
    cohort: list[LesionSample] = []
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sample = LesionSample(rec["patient_id"], rec["lesion_id"],
                                      rec["label"], rec["features"])
            except (json.JSONDecodeError, KeyError, TypeError, CohortError) as exc:
                raise CohortError(f"{path}: line {lineno}: {exc}") from exc
            key = (sample.patient_id, sample.lesion_id)
            if key in seen:
                raise CohortError(
                    f"{path}: line {lineno}: duplicate sample {key}")
            seen.add(key)
            cohort.append(sample)
    return cohort


def inspect_cohort(cohort) -> dict:
    """Per-patient class counts plus the global normal:ud ratio."""
    per_patient: dict[str, dict[str, int]] = {}
    totals = {"normal": 0, "ud": 0}
    for s in cohort:
        counts = per_patient.setdefault(s.patient_id, {"normal": 0, "ud": 0})
        counts[s.label] += 1
        totals[s.label] += 1
    ratio = totals["normal"] / totals["ud"] if totals["ud"] else float("inf")
    return {
        "n_patients": len(per_patient),
        "n_samples": len(cohort),
        "n_normal": totals["normal"],
        "n_ud": totals["ud"],
        "normal_to_ud_ratio": ratio,
        "per_patient": {pid: per_patient[pid] for pid in sorted(per_patient)},
    }
