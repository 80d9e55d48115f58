"""Patient-balanced batch sampling and online triplet/quadruplet mining.

Mining is patient-local: anchors, positives and negatives all come from
one patient, and quadruplets add a secondary negative from a different
patient (either class). Selection is "random-hard": a uniform draw
among the candidates whose hinged loss is strictly positive.

Determinism contract: for a fixed generator state the sampled batch and
every mining decision are reproducible. Patients are processed in
ascending patient_id with an RNG stream spawned per patient, so results
do not depend on how the per-patient work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .cohort import LesionSample

__all__ = [
    "HARD",
    "SEMI_HARD",
    "EASY",
    "SamplerConfig",
    "MiniBatch",
    "CandidateTriplet",
    "Quadruplet",
    "MiningStats",
    "MiningError",
    "sample_minibatch",
    "enumerate_ap_pairs",
    "classify_triplet",
    "select_random_hard",
    "mine_triplets",
    "mine_quadruplets",
    "mine_triplets_naive",
    "pairwise_distances",
]

HARD = "hard"
SEMI_HARD = "semi_hard"
EASY = "easy"


class MiningError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    patients_per_batch: int = 4
    samples_per_patient: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.patients_per_batch < 1 or self.samples_per_patient < 1:
            raise MiningError("sampler sizes must be positive")

    @property
    def batch_size(self) -> int:
        return self.patients_per_batch * self.samples_per_patient


@dataclass
class MiniBatch:
    samples: list[LesionSample]
    positions_by_patient: dict[str, list[int]]

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> list[str]:
        return [s.label for s in self.samples]

    def features(self) -> np.ndarray:
        return np.array([s.features for s in self.samples])


@dataclass(frozen=True)
class CandidateTriplet:
    a: int
    p: int
    n: int
    loss: float
    category: str


@dataclass(frozen=True)
class Quadruplet:
    a: int
    p: int
    n: int
    sn: int
    patient_loss: float
    lesion_loss: float


@dataclass
class MiningStats:
    ap_pairs: int = 0
    candidates: int = 0
    hard: int = 0
    semi_hard: int = 0
    easy: int = 0
    selected: int = 0
    pairs_dropped_no_negative: int = 0
    sn_candidates: int = 0
    pairs_dropped_no_sn: int = 0
    batches_without_cross_patient: int = 0

    def __add__(self, other: "MiningStats") -> "MiningStats":
        return MiningStats(**{
            f.name: getattr(self, f.name) + getattr(other, f.name)
            for f in fields(self)})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sample_minibatch(cohort, config: SamplerConfig,
                     rng: np.random.Generator) -> MiniBatch:
    """Pick X patients uniformly without replacement, then k samples per
    patient (with replacement only when the patient has fewer than k,
    in which case every sample appears at least once).

    `cohort` is a sample list or an already-grouped
    {patient_id: samples} dict."""
    if isinstance(cohort, dict):
        by_patient = cohort
    else:
        by_patient = {}
        for s in cohort:
            by_patient.setdefault(s.patient_id, []).append(s)
    pids = sorted(by_patient)
    x = config.patients_per_batch
    k = config.samples_per_patient
    if len(pids) < x:
        raise MiningError(
            f"need >= {x} patients in the cohort, found {len(pids)}")
    chosen = [pids[i] for i in rng.permutation(len(pids))[:x]]
    samples: list[LesionSample] = []
    positions: dict[str, list[int]] = {}
    for pid in chosen:
        pool = by_patient[pid]
        n = len(pool)
        if n >= k:
            picks = list(rng.permutation(n)[:k])
        else:
            picks = list(range(n)) + list(rng.integers(0, n, size=k - n))
        positions[pid] = list(range(len(samples), len(samples) + k))
        samples.extend(pool[i] for i in picks)
    return MiniBatch(samples, positions)


def enumerate_ap_pairs(batch: MiniBatch, patient_id: str) -> list[tuple[int, int]]:
    """All ordered pairs of distinct same-class positions within one
    patient; both classes anchor in turn."""
    if patient_id not in batch.positions_by_patient:
        raise MiningError(f"patient {patient_id!r} not in batch")
    positions = batch.positions_by_patient[patient_id]
    pairs = []
    for a in positions:
        for p in positions:
            if a != p and batch.samples[a].label == batch.samples[p].label:
                pairs.append((a, p))
    return pairs


def classify_triplet(d_ap: float, d_an: float, margin: float) -> str:
    """hard: negative closer than the positive (loss > margin);
    semi_hard: loss in (0, margin]; easy: margin satisfied, loss 0."""
    if d_ap < 0 or d_an < 0:
        raise MiningError("distances must be nonnegative")
    if d_an < d_ap:
        return HARD
    if d_an < d_ap + margin:
        return SEMI_HARD
    return EASY


def select_random_hard(candidates, rng: np.random.Generator):
    """Uniform choice among candidates with strictly positive loss;
    None when nothing qualifies."""
    qualifying = [c for c in candidates if c.loss > 0.0]
    if not qualifying:
        return None
    return qualifying[int(rng.integers(len(qualifying)))]


def pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    sq = np.sum(e * e, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (e @ e.T)
    return np.sqrt(np.maximum(d2, 0.0))


def _pair_scan(dist, a, p, cand_positions, margin, stats: MiningStats):
    """Hinged losses of all (a, p, cand) triplets; returns the
    qualifying (position, loss) list and updates category counters.

    Categories follow classify_triplet exactly: hard d_an < d_ap, easy
    d_an >= d_ap + margin, semi-hard in between.
    """
    n = len(cand_positions)
    if n == 0:
        return []
    cands = np.asarray(cand_positions)
    d_ap = dist[a, p]
    d_an = dist[a, cands]
    tl = d_ap - d_an + margin
    n_hard = int(np.count_nonzero(d_an < d_ap))
    n_easy = int(np.count_nonzero(d_an >= d_ap + margin))
    stats.candidates += n
    stats.hard += n_hard
    stats.easy += n_easy
    stats.semi_hard += n - n_hard - n_easy
    mask = tl > 0.0
    return [(int(c), float(t)) for c, t in zip(cands[mask], tl[mask])]


def _negatives_within(batch, positions, anchor_label):
    return [i for i in positions if batch.samples[i].label != anchor_label]


def mine_triplets(batch: MiniBatch, embeddings, margin_per_patient,
                  rng: np.random.Generator):
    """Per patient and per anchor-positive pair, pick one random-hard
    same-patient negative. Returns (triplets, stats)."""
    dist = pairwise_distances(embeddings)
    stats = MiningStats()
    triplets: list[CandidateTriplet] = []
    pids = sorted(batch.positions_by_patient)
    streams = rng.spawn(len(pids))
    for pid, prng in zip(pids, streams):
        margin = margin_per_patient[pid]
        positions = batch.positions_by_patient[pid]
        for a, p in enumerate_ap_pairs(batch, pid):
            stats.ap_pairs += 1
            negs = _negatives_within(batch, positions, batch.samples[a].label)
            qualifying = _pair_scan(dist, a, p, negs, margin, stats)
            if not qualifying:
                stats.pairs_dropped_no_negative += 1
                continue
            n, tl = qualifying[int(prng.integers(len(qualifying)))]
            stats.selected += 1
            triplets.append(CandidateTriplet(
                a, p, n, tl, classify_triplet(dist[a, p], dist[a, n], margin)))
    return triplets, stats


def mine_quadruplets(batch: MiniBatch, embeddings, margin_per_patient,
                     beta: float, rng: np.random.Generator):
    """Extend each selected triplet with a random-hard secondary
    negative from a different patient (any class, margin beta). Pairs
    lacking a positive-loss negative or secondary negative are dropped.
    Returns (quadruplets, stats)."""
    dist = pairwise_distances(embeddings)
    stats = MiningStats()
    quads: list[Quadruplet] = []
    pids = sorted(batch.positions_by_patient)
    if len(pids) < 2:
        stats.batches_without_cross_patient += 1
        return quads, stats
    streams = rng.spawn(len(pids))
    for pid, prng in zip(pids, streams):
        margin = margin_per_patient[pid]
        positions = batch.positions_by_patient[pid]
        cross = np.array(sorted(
            i for other, pos in batch.positions_by_patient.items()
            if other != pid for i in pos))
        for a, p in enumerate_ap_pairs(batch, pid):
            stats.ap_pairs += 1
            negs = _negatives_within(batch, positions, batch.samples[a].label)
            qualifying = _pair_scan(dist, a, p, negs, margin, stats)
            if not qualifying:
                stats.pairs_dropped_no_negative += 1
                continue
            n, tl_n = qualifying[int(prng.integers(len(qualifying)))]
            d_ap = dist[a, p]
            stats.sn_candidates += len(cross)
            tl_sn_all = d_ap - dist[a, cross] + beta
            mask = tl_sn_all > 0.0
            sn_qualifying = [(int(c), float(t))
                             for c, t in zip(cross[mask], tl_sn_all[mask])]
            if not sn_qualifying:
                stats.pairs_dropped_no_sn += 1
                continue
            sn, tl_sn = sn_qualifying[int(prng.integers(len(sn_qualifying)))]
            stats.selected += 1
            quads.append(Quadruplet(a, p, n, sn, tl_n, tl_sn))
    return quads, stats


def qualifying_sets(batch: MiniBatch, embeddings, margin_per_patient,
                    beta: float | None = None) -> dict:
    """The online qualifying-candidate sets the miners select from,
    keyed by (patient_id, a, p): {"negatives": set, "secondary": set}.

    Exposed so the online computation can be checked against brute-force
    enumeration; secondary sets are filled only when beta is given.
    """
    dist = pairwise_distances(embeddings)
    out: dict[tuple, dict] = {}
    for pid in sorted(batch.positions_by_patient):
        margin = margin_per_patient[pid]
        positions = batch.positions_by_patient[pid]
        cross = sorted(i for other, pos in batch.positions_by_patient.items()
                       if other != pid for i in pos)
        for a, p in enumerate_ap_pairs(batch, pid):
            scratch = MiningStats()
            negs = _negatives_within(batch, positions, batch.samples[a].label)
            entry = {"negatives": {c for c, _ in
                                   _pair_scan(dist, a, p, negs, margin, scratch)}}
            if beta is not None:
                entry["secondary"] = {
                    c for c in cross if dist[a, p] - dist[a, c] + beta > 0.0}
            out[(pid, a, p)] = entry
    return out


def mine_triplets_naive(batch: MiniBatch, embeddings, margin: float,
                        rng: np.random.Generator):
    """Whole-batch mining that ignores patient identity: anchors and
    positives share a class label, negatives take the opposite one."""
    dist = pairwise_distances(embeddings)
    stats = MiningStats()
    triplets: list[CandidateTriplet] = []
    n_total = len(batch)
    labels = batch.labels()
    by_label: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_label.setdefault(lab, []).append(i)
    for a in range(n_total):
        negs = [i for i in range(n_total) if labels[i] != labels[a]]
        if not negs:
            continue
        for p in by_label[labels[a]]:
            if p == a:
                continue
            stats.ap_pairs += 1
            qualifying = _pair_scan(dist, a, p, negs, margin, stats)
            if not qualifying:
                stats.pairs_dropped_no_negative += 1
                continue
            n, tl = qualifying[int(rng.integers(len(qualifying)))]
            stats.selected += 1
            triplets.append(CandidateTriplet(
                a, p, n, tl, classify_triplet(dist[a, p], dist[a, n], margin)))
    return triplets, stats
