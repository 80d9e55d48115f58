"""Distance and hinged loss kernels for the triplet and tiered
quadruplet objectives, with exact subgradients w.r.t. the embeddings.

Conventions:
  * every per-instance term is hinged, max(0, .): an instance whose
    margin is already satisfied contributes zero loss and zero gradient;
  * the intra-patient (anchor/positive/negative, margin alpha) term is
    called the patient-level term and the cross-patient
    (secondary-negative, margin beta) term the lesion-level term;
  * when two embeddings coincide, the gradient of their distance is the
    zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MarginSet",
    "LossBreakdown",
    "euclidean_distance",
    "triplet_term",
    "batch_triplet_loss",
    "tiered_quad_term",
    "dmt_quad_loss",
    "tiered_quad_loss",
    "loss_grad_wrt_embeddings",
    "triplet_grad_wrt_embeddings",
]

ALPHA_CLAMP = (0.1, 10.0)


class LossInputError(ValueError):
    pass


@dataclass(frozen=True)
class MarginSet:
    """Fixed intra-patient margin alpha, fixed cross-patient margin beta,
    and optionally a per-patient dynamic alpha."""

    alpha: float = 1.0
    beta: float = 1.5
    alpha_dynamic: dict | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise LossInputError("margins must be nonnegative")
        if self.alpha_dynamic is not None:
            lo, hi = ALPHA_CLAMP
            for pid, a in self.alpha_dynamic.items():
                if not (lo <= a <= hi):
                    raise LossInputError(
                        f"dynamic margin for patient {pid!r} outside clamp range: {a}")

    def alpha_for(self, patient_id) -> float:
        if self.alpha_dynamic is not None and patient_id in self.alpha_dynamic:
            return self.alpha_dynamic[patient_id]
        return self.alpha


@dataclass
class LossBreakdown:
    total: float
    patient_level_term: float
    lesion_level_term: float
    per_instance: list[float] = field(default_factory=list)


def euclidean_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise LossInputError(f"length mismatch: {u.shape} vs {v.shape}")
    return float(np.sqrt(np.sum((u - v) ** 2)))


def triplet_term(d_ap: float, d_an: float, margin: float) -> float:
    """max(0, d_ap - d_an + margin)."""
    if d_ap < 0 or d_an < 0:
        raise LossInputError("distances must be nonnegative")
    if margin < 0:
        raise LossInputError("margin must be nonnegative")
    return max(0.0, d_ap - d_an + margin)


def batch_triplet_loss(triplet_embeddings, margin: float) -> LossBreakdown:
    """Mean hinged triplet term over a batch of (a, p, n) embeddings."""
    if len(triplet_embeddings) == 0:
        raise LossInputError("empty triplet batch")
    per = []
    for a, p, n in triplet_embeddings:
        per.append(triplet_term(euclidean_distance(a, p),
                                euclidean_distance(a, n), margin))
    total = float(np.mean(per))
    return LossBreakdown(total=total, patient_level_term=total,
                         lesion_level_term=0.0, per_instance=per)


def tiered_quad_term(d_ap: float, d_an: float, d_asn: float,
                     alpha: float, beta: float) -> tuple[float, float]:
    """(patient_term, lesion_term) for one quadruplet.

    patient_term hinges d_ap - d_an + alpha (same-patient negative);
    lesion_term hinges d_ap - d_asn + beta (cross-patient secondary
    negative).
    """
    if min(d_ap, d_an, d_asn) < 0:
        raise LossInputError("distances must be nonnegative")
    if alpha < 0 or beta < 0:
        raise LossInputError("margins must be nonnegative")
    return (max(0.0, d_ap - d_an + alpha), max(0.0, d_ap - d_asn + beta))


def dmt_quad_loss(quadruplet_embeddings, per_instance_alpha,
                  beta: float) -> LossBreakdown:
    """Mean of (patient_term with alpha_i + lesion_term with beta) over
    a batch of (a, p, n, sn) embeddings.

    per_instance_alpha carries each instance's (possibly dynamic)
    intra-patient margin; with every alpha_i equal to a fixed alpha this
    reduces exactly to the fixed-margin tiered quadruplet loss.
    """
    quads = list(quadruplet_embeddings)
    alphas = list(per_instance_alpha)
    if len(alphas) != len(quads):
        raise LossInputError(
            f"{len(alphas)} margins for {len(quads)} quadruplets")
    if len(quads) == 0:
        raise LossInputError("empty quadruplet batch")
    per, pat_terms, les_terms = [], [], []
    for (a, p, n, sn), alpha_i in zip(quads, alphas):
        if alpha_i < 0:
            raise LossInputError("per-instance margins must be nonnegative")
        d_ap = euclidean_distance(a, p)
        pat, les = tiered_quad_term(d_ap, euclidean_distance(a, n),
                                    euclidean_distance(a, sn), alpha_i, beta)
        pat_terms.append(pat)
        les_terms.append(les)
        per.append(pat + les)
    return LossBreakdown(total=float(np.mean(per)),
                         patient_level_term=float(np.mean(pat_terms)),
                         lesion_level_term=float(np.mean(les_terms)),
                         per_instance=per)


def tiered_quad_loss(quadruplet_embeddings, alpha: float,
                     beta: float) -> LossBreakdown:
    """Fixed-margin tiered quadruplet loss (every instance uses alpha)."""
    n = len(list(quadruplet_embeddings))
    return dmt_quad_loss(quadruplet_embeddings, [alpha] * n, beta)


def _dist_grad(u: np.ndarray, v: np.ndarray):
    """(d, grad_u) of the Euclidean distance; zero vector at d = 0."""
    diff = u - v
    d = float(np.sqrt(np.sum(diff * diff)))
    if d == 0.0:
        return 0.0, np.zeros_like(diff)
    return d, diff / d


def loss_grad_wrt_embeddings(quadruplet_embeddings, per_instance_alpha,
                             beta: float):
    """Gradients of dmt_quad_loss w.r.t. each of the four embeddings,
    per instance, including the 1/N batch-mean factor.

    Inactive hinge terms contribute nothing; instances with both hinges
    inactive yield four zero vectors.
    """
    quads = [tuple(np.asarray(e, dtype=np.float64) for e in q)
             for q in quadruplet_embeddings]
    alphas = list(per_instance_alpha)
    if len(alphas) != len(quads):
        raise LossInputError(
            f"{len(alphas)} margins for {len(quads)} quadruplets")
    n = len(quads)
    out = []
    for (a, p, neg, sn), alpha_i in zip(quads, alphas):
        g_a = np.zeros_like(a)
        g_p = np.zeros_like(p)
        g_n = np.zeros_like(neg)
        g_sn = np.zeros_like(sn)
        d_ap, dap_da = _dist_grad(a, p)
        d_an, dan_da = _dist_grad(a, neg)
        d_asn, dasn_da = _dist_grad(a, sn)
        scale = 1.0 / n
        if d_ap - d_an + alpha_i > 0.0:
            g_a += scale * (dap_da - dan_da)
            g_p += scale * (-dap_da)
            g_n += scale * dan_da
        if d_ap - d_asn + beta > 0.0:
            g_a += scale * (dap_da - dasn_da)
            g_p += scale * (-dap_da)
            g_sn += scale * dasn_da
        out.append((g_a, g_p, g_n, g_sn))
    return out


def triplet_grad_wrt_embeddings(triplet_embeddings, margin: float):
    """Gradients of batch_triplet_loss w.r.t. (a, p, n), per instance."""
    trips = [tuple(np.asarray(e, dtype=np.float64) for e in t)
             for t in triplet_embeddings]
    n = len(trips)
    out = []
    for a, p, neg in trips:
        g_a = np.zeros_like(a)
        g_p = np.zeros_like(p)
        g_n = np.zeros_like(neg)
        d_ap, dap_da = _dist_grad(a, p)
        d_an, dan_da = _dist_grad(a, neg)
        if d_ap - d_an + margin > 0.0:
            scale = 1.0 / n
            g_a += scale * (dap_da - dan_da)
            g_p += scale * (-dap_da)
            g_n += scale * dan_da
        out.append((g_a, g_p, g_n))
    return out
