"""Two-stage training pipeline.

Stage 1 trains the embedding network under one of four metric-learning
modes (whole-batch triplets, patient-specific triplets, tiered
quadruplets with a fixed margin, tiered quadruplets with per-patient
dynamic margins). Stage 2 freezes the embedder and fits a 2-logit
affine head with cross-entropy. A "baseline" mode trains the identical
topology end to end with cross-entropy only, skipping stage 1.

All randomness is derived from (seed, epoch, batch) tuples, so a run is
reproducible batch for batch and can be resumed mid-training. One
logical writer owns the parameters during training; every other
operation only reads them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses, mining
from .cohort import LesionSample, oversample_minority, split_by_patient
from .embedder import (AdamState, EmbedderConfig, EmbedderParams,
                       NumericError, adam_step, backward, embed_batch,
                       init_params)
from .evaluation import MetricsReport, aggregate_over_seeds, evaluate_predictions
from .losses import MarginSet
from .margins import dynamic_margin
from .mining import MiningStats, SamplerConfig, sample_minibatch

__all__ = [
    "MODES",
    "Stage1Config",
    "Stage2Config",
    "ExperimentConfig",
    "ClassifierHead",
    "TrainLogRecord",
    "Stage2Result",
    "cross_entropy",
    "train_stage1",
    "train_stage2",
    "train_baseline",
    "predict",
    "run_experiment",
]

MODES = ("naive_triplet", "ps_triplet", "t_quad", "dmt_quad")
CLASS_INDEX = {"normal": 0, "ud": 1}


@dataclass(frozen=True)
class Stage1Config:
    mode: str
    embedder: EmbedderConfig
    epochs: int = 30
    batches_per_epoch: int = 50
    sampler: SamplerConfig = SamplerConfig()
    margins: MarginSet = MarginSet()
    lr: float = 0.0001
    seed: int = 0
    val_batches: int = 2
    # test hook: run the dmt_quad code path with alpha_x pinned to the
    # fixed alpha; must reproduce t_quad step for step
    pin_dynamic_margin: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown stage-1 mode {self.mode!r}")


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.0001
    seed: int = 0


@dataclass
class TrainLogRecord:
    epoch: int
    mean_loss: float
    n_instances: int
    n_batches: int
    n_skipped_batches: int
    counters: dict
    alpha_by_patient: dict
    n_margin_fallbacks: int
    val_loss: float | None = None

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "mean_loss": self.mean_loss,
            "n_instances": self.n_instances,
            "n_batches": self.n_batches,
            "n_skipped_batches": self.n_skipped_batches,
            "counters": self.counters,
            "alpha_by_patient": self.alpha_by_patient,
            "n_margin_fallbacks": self.n_margin_fallbacks,
            "val_loss": self.val_loss,
        }


@dataclass
class ClassifierHead:
    """Affine map from the embedding to 2 logits (normal, ud)."""

    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, embedding_dim: int) -> "ClassifierHead":
        return cls(np.zeros((2, embedding_dim)), np.zeros(2))

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        return np.atleast_2d(embeddings) @ self.weights.T + self.bias

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weights.copy(), self.bias.copy())


def cross_entropy(logits, label: int):
    """(loss, grad_logits) of -log softmax(logits)[label], stabilized by
    max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    shifted = z - z.max()
    log_norm = np.log(np.sum(np.exp(shifted)))
    loss = float(log_norm - shifted[label])
    probs = np.exp(shifted - log_norm)
    grad = probs.copy()
    grad[label] -= 1.0
    return loss, grad


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _group_by_patient(samples) -> dict[str, list[LesionSample]]:
    grouped: dict[str, list[LesionSample]] = {}
    for s in samples:
        grouped.setdefault(s.patient_id, []).append(s)
    return grouped


def _batch_margins(config: Stage1Config, batch, embeddings, base):
    """Per-patient mining margins for one batch; dynamic for dmt_quad."""
    alpha = config.margins.alpha
    pids = sorted(batch.positions_by_patient)
    if config.mode != "dmt_quad" or config.pin_dynamic_margin:
        return {pid: alpha for pid in pids}, 0
    out = {}
    fallbacks = 0
    for i, pid in enumerate(pids):
        rows = embeddings[batch.positions_by_patient[pid]]
        dm = dynamic_margin(rows, alpha, seed=(*base, 2, i), patient_id=pid)
        out[pid] = dm.alpha_x
        fallbacks += int(dm.fallback_used)
    return out, fallbacks


def _mine(config: Stage1Config, batch, embeddings, margin_by_patient, rng):
    if config.mode == "naive_triplet":
        return mining.mine_triplets_naive(batch, embeddings,
                                          config.margins.alpha, rng)
    if config.mode == "ps_triplet":
        return mining.mine_triplets(batch, embeddings, margin_by_patient, rng)
    return mining.mine_quadruplets(batch, embeddings, margin_by_patient,
                                   config.margins.beta, rng)


def _unit_rows(diff: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """diff / dist rowwise with the zero-distance rows mapped to zero
    (the subgradient convention for coincident embeddings)."""
    out = np.zeros_like(diff)
    np.divide(diff, dist[:, None], out=out, where=dist[:, None] > 0.0)
    return out


def _batch_loss_and_upstream(config: Stage1Config, batch, embeddings,
                             mined, margin_by_patient):
    """Loss breakdown plus the d(loss)/d(embedding) matrix aligned with
    the batch positions.

    Every mined instance has strictly positive hinge terms by selection,
    so its loss is exactly the value mining recorded and both hinge
    branches of the gradient are active. Distances come from the same
    pairwise matrix mining used.
    """
    upstream = np.zeros_like(embeddings)
    dist = mining.pairwise_distances(embeddings)
    scale = 1.0 / len(mined)
    if config.mode in ("naive_triplet", "ps_triplet"):
        # both triplet modes train with the fixed alpha margin
        idx_a = np.array([t.a for t in mined])
        idx_p = np.array([t.p for t in mined])
        idx_n = np.array([t.n for t in mined])
        per = [t.loss for t in mined]
        breakdown = losses.LossBreakdown(
            total=float(np.mean(per)), patient_level_term=float(np.mean(per)),
            lesion_level_term=0.0, per_instance=per)
        u_ap = _unit_rows(embeddings[idx_a] - embeddings[idx_p],
                          dist[idx_a, idx_p])
        u_an = _unit_rows(embeddings[idx_a] - embeddings[idx_n],
                          dist[idx_a, idx_n])
        np.add.at(upstream, idx_a, scale * (u_ap - u_an))
        np.add.at(upstream, idx_p, -scale * u_ap)
        np.add.at(upstream, idx_n, scale * u_an)
        return breakdown, upstream

    idx_a = np.array([q.a for q in mined])
    idx_p = np.array([q.p for q in mined])
    idx_n = np.array([q.n for q in mined])
    idx_sn = np.array([q.sn for q in mined])
    pat = [q.patient_loss for q in mined]
    les = [q.lesion_loss for q in mined]
    breakdown = losses.LossBreakdown(
        total=float(np.mean(pat) + np.mean(les)),
        patient_level_term=float(np.mean(pat)),
        lesion_level_term=float(np.mean(les)),
        per_instance=[p + l for p, l in zip(pat, les)])
    u_ap = _unit_rows(embeddings[idx_a] - embeddings[idx_p],
                      dist[idx_a, idx_p])
    u_an = _unit_rows(embeddings[idx_a] - embeddings[idx_n],
                      dist[idx_a, idx_n])
    u_asn = _unit_rows(embeddings[idx_a] - embeddings[idx_sn],
                       dist[idx_a, idx_sn])
    np.add.at(upstream, idx_a, scale * (2.0 * u_ap - u_an - u_asn))
    np.add.at(upstream, idx_p, -2.0 * scale * u_ap)
    np.add.at(upstream, idx_n, scale * u_an)
    np.add.at(upstream, idx_sn, scale * u_asn)
    return breakdown, upstream


def _run_mining_batch(config: Stage1Config, params, grouped, base):
    """Sample, embed, set margins and mine one batch. Returns everything
    the update (or a read-only validation pass) needs."""
    sampler_rng = np.random.default_rng((*base, 0))
    mining_rng = np.random.default_rng((*base, 1))
    batch = sample_minibatch(grouped, config.sampler, sampler_rng)
    feats = batch.features()
    emb = embed_batch(params, feats)
    if not np.all(np.isfinite(emb)):
        raise NumericError(
            f"non-finite embeddings in mode {config.mode} at "
            f"(seed, epoch, batch) = {base}")
    margin_by_patient, n_fallbacks = _batch_margins(config, batch, emb, base)
    mined, stats = _mine(config, batch, emb, margin_by_patient, mining_rng)
    return batch, feats, emb, margin_by_patient, n_fallbacks, mined, stats


def train_stage1(train_samples, config: Stage1Config, val_samples=None,
                 init: tuple[EmbedderParams, AdamState, int] | None = None):
    """Metric training loop.

    Returns (params, [TrainLogRecord per epoch], adam_state). `init`
    resumes from (params, adam_state, next_epoch); epoch-indexed seeding
    makes the resumed trajectory identical to an uninterrupted run.
    Batches that mine nothing are skipped and counted; a non-finite loss
    aborts.
    """
    grouped = _group_by_patient(train_samples)
    if len(grouped) < config.sampler.patients_per_batch:
        raise ValueError(
            f"training set has {len(grouped)} patients; "
            f"sampler needs {config.sampler.patients_per_batch}")
    if init is not None:
        params, state, start_epoch = init
        params = params.copy()
    else:
        params = init_params(config.embedder)
        state = AdamState.zeros_like(params, lr=config.lr)
        start_epoch = 0
    val_grouped = _group_by_patient(val_samples) if val_samples else None
    if val_grouped is not None and \
            len(val_grouped) < config.sampler.patients_per_batch:
        val_grouped = None

    logs: list[TrainLogRecord] = []
    for epoch in range(start_epoch, config.epochs):
        loss_sum = 0.0
        n_instances = 0
        n_batches = 0
        n_skipped = 0
        counters = MiningStats()
        alpha_sums: dict[str, float] = {}
        alpha_counts: dict[str, int] = {}
        fallbacks = 0
        for b in range(config.batches_per_epoch):
            base = (config.seed, epoch, b)
            batch, feats, emb, margin_by_patient, n_fb, mined, stats = \
                _run_mining_batch(config, params, grouped, base)
            counters = counters + stats
            fallbacks += n_fb
            if config.mode == "dmt_quad" and not config.pin_dynamic_margin:
                for pid, a_x in margin_by_patient.items():
                    alpha_sums[pid] = alpha_sums.get(pid, 0.0) + a_x
                    alpha_counts[pid] = alpha_counts.get(pid, 0) + 1
            if not mined:
                n_skipped += 1
                continue
            breakdown, upstream = _batch_loss_and_upstream(
                config, batch, emb, mined, margin_by_patient)
            if not np.isfinite(breakdown.total):
                raise NumericError(
                    f"non-finite loss in mode {config.mode} at "
                    f"epoch {epoch} batch {b}")
            grads = backward(params, feats, upstream)
            params, state = adam_step(params, grads, state)
            loss_sum += float(np.sum(breakdown.per_instance))
            n_instances += len(breakdown.per_instance)
            n_batches += 1

        val_loss = None
        if val_grouped is not None and config.val_batches > 0:
            v_sum, v_n = 0.0, 0
            for vb in range(config.val_batches):
                base = (config.seed, epoch, 100_000 + vb)
                batch, _, emb, margin_by_patient, _, mined, _ = \
                    _run_mining_batch(config, params, val_grouped, base)
                if mined:
                    vbreak, _ = _batch_loss_and_upstream(
                        config, batch, emb, mined, margin_by_patient)
                    v_sum += float(np.sum(vbreak.per_instance))
                    v_n += len(vbreak.per_instance)
            val_loss = v_sum / v_n if v_n else None

        logs.append(TrainLogRecord(
            epoch=epoch,
            mean_loss=loss_sum / n_instances if n_instances else 0.0,
            n_instances=n_instances,
            n_batches=n_batches,
            n_skipped_batches=n_skipped,
            counters=counters.as_dict(),
            alpha_by_patient={pid: alpha_sums[pid] / alpha_counts[pid]
                              for pid in sorted(alpha_sums)},
            n_margin_fallbacks=fallbacks,
            val_loss=val_loss,
        ))
    return params, logs, state


@dataclass
class Stage2Result:
    head: ClassifierHead
    initial_loss: float
    best_epoch: int
    logs: list[dict] = field(default_factory=list)


def _labels_to_indices(samples) -> np.ndarray:
    return np.array([CLASS_INDEX[s.label] for s in samples], dtype=int)


def _head_adam_wrap(head: ClassifierHead) -> EmbedderParams:
    return EmbedderParams([head.weights], [head.bias])


def _mean_ce(head: ClassifierHead, emb: np.ndarray, y: np.ndarray) -> float:
    logits = head.logits(emb)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(len(y)), y]))


def _balanced_accuracy(head: ClassifierHead, emb: np.ndarray,
                       y: np.ndarray) -> float:
    logits = head.logits(emb)
    pred_ud = logits[:, 1] > logits[:, 0]
    is_ud = y == 1
    sens = float(np.mean(pred_ud[is_ud])) if is_ud.any() else 0.0
    spec = float(np.mean(~pred_ud[~is_ud])) if (~is_ud).any() else 0.0
    return 0.5 * (sens + spec)


def train_stage2(frozen_params: EmbedderParams, train_samples,
                 config: Stage2Config, val_samples=None) -> Stage2Result:
    """Cross-entropy training of the affine head on frozen embeddings.

    The embedder is read once to cache all embeddings and never written.
    With a validation set, the head maximizing validation balanced
    accuracy (mean of sensitivity and specificity) is kept; ties go to
    the earlier epoch.
    """
    emb = embed_batch(frozen_params, [s.features for s in train_samples])
    y = _labels_to_indices(train_samples)
    head = ClassifierHead.zeros(emb.shape[1])
    state = AdamState.zeros_like(_head_adam_wrap(head), lr=config.lr)
    initial_loss = _mean_ce(head, emb, y)

    val_emb = val_y = None
    if val_samples:
        val_emb = embed_batch(frozen_params, [s.features for s in val_samples])
        val_y = _labels_to_indices(val_samples)
    best_head, best_score, best_epoch = None, -np.inf, -1

    logs = []
    n = len(train_samples)
    for epoch in range(config.epochs):
        rng = np.random.default_rng((config.seed, epoch))
        order = rng.permutation(n)
        epoch_loss, n_seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            e_b, y_b = emb[idx], y[idx]
            logits = head.logits(e_b)
            probs = _softmax_rows(logits)
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_norm = np.log(np.exp(shifted).sum(axis=1))
            losses_b = log_norm - shifted[np.arange(len(idx)), y_b]
            epoch_loss += float(losses_b.sum())
            n_seen += len(idx)
            dlogits = probs
            dlogits[np.arange(len(idx)), y_b] -= 1.0
            dlogits /= len(idx)
            grads = EmbedderParams([dlogits.T @ e_b], [dlogits.sum(axis=0)])
            wrapped, state = adam_step(_head_adam_wrap(head), grads, state)
            head = ClassifierHead(wrapped.weights[0], wrapped.biases[0])
        rec = {"epoch": epoch, "train_loss": epoch_loss / n_seen}
        if val_emb is not None:
            score = _balanced_accuracy(head, val_emb, val_y)
            rec["val_balanced_accuracy"] = score
            if score > best_score:
                best_score, best_head, best_epoch = score, head.copy(), epoch
        logs.append(rec)

    if best_head is None:
        best_head, best_epoch = head, config.epochs - 1
    return Stage2Result(best_head, initial_loss, best_epoch, logs)


def train_baseline(train_samples, embedder_config: EmbedderConfig,
                   config: Stage2Config, val_samples=None):
    """End-to-end cross-entropy training of the same topology plus the
    2-logit head; no metric stage. Returns (params, Stage2Result)."""
    feats = np.array([s.features for s in train_samples])
    y = _labels_to_indices(train_samples)
    params = init_params(embedder_config)
    state = AdamState.zeros_like(params, lr=config.lr)
    head = ClassifierHead.zeros(embedder_config.embedding_dim)
    head_state = AdamState.zeros_like(_head_adam_wrap(head), lr=config.lr)

    val_feats = val_y = None
    if val_samples:
        val_feats = np.array([s.features for s in val_samples])
        val_y = _labels_to_indices(val_samples)
    best = None
    best_score, best_epoch = -np.inf, -1

    initial_loss = _mean_ce(head, embed_batch(params, feats), y)
    logs = []
    n = len(train_samples)
    for epoch in range(config.epochs):
        rng = np.random.default_rng((config.seed, epoch))
        order = rng.permutation(n)
        epoch_loss, n_seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            x_b, y_b = feats[idx], y[idx]
            emb_b = embed_batch(params, x_b)
            logits = head.logits(emb_b)
            probs = _softmax_rows(logits)
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_norm = np.log(np.exp(shifted).sum(axis=1))
            epoch_loss += float((log_norm -
                                 shifted[np.arange(len(idx)), y_b]).sum())
            n_seen += len(idx)
            dlogits = probs
            dlogits[np.arange(len(idx)), y_b] -= 1.0
            dlogits /= len(idx)
            head_grads = EmbedderParams([dlogits.T @ emb_b],
                                        [dlogits.sum(axis=0)])
            upstream = dlogits @ head.weights
            net_grads = backward(params, x_b, upstream)
            params, state = adam_step(params, net_grads, state)
            wrapped, head_state = adam_step(_head_adam_wrap(head),
                                            head_grads, head_state)
            head = ClassifierHead(wrapped.weights[0], wrapped.biases[0])
        rec = {"epoch": epoch, "train_loss": epoch_loss / n_seen}
        if val_feats is not None:
            val_emb = embed_batch(params, val_feats)
            score = _balanced_accuracy(head, val_emb, val_y)
            rec["val_balanced_accuracy"] = score
            if score > best_score:
                best_score = score
                best = (params.copy(), head.copy())
                best_epoch = epoch
        logs.append(rec)

    if best is None:
        best, best_epoch = (params, head), config.epochs - 1
    params, head = best
    return params, Stage2Result(head, initial_loss, best_epoch, logs)


def predict(frozen_params: EmbedderParams, head: ClassifierHead, samples):
    """(probability_ud, predicted_label) per sample; logit ties predict
    normal, the majority class."""
    emb = embed_batch(frozen_params, [s.features for s in samples])
    logits = head.logits(emb)
    probs = _softmax_rows(logits)
    out = []
    for row_logits, row_probs in zip(logits, probs):
        label = "ud" if row_logits[1] > row_logits[0] else "normal"
        out.append((float(row_probs[1]), label))
    return out


@dataclass
class ExperimentConfig:
    """Comparison protocol: one patient-level split of the cohort
    (split_seed), repeated training runs over the listed seeds, and a
    mean +/- std table per mode on the shared test split."""

    modes: tuple = ("baseline", "naive_triplet", "ps_triplet",
                    "t_quad", "dmt_quad")
    seeds: tuple = (0, 1, 2, 3, 4)
    split_seed: int = 0
    fractions: tuple = (0.6, 0.2, 0.2)
    oversample_factor: int = 10
    hidden_dims: tuple = (64, 64)
    embedding_dim: int = 128
    stage1_epochs: int = 30
    batches_per_epoch: int = 50
    patients_per_batch: int = 4
    samples_per_patient: int = 8
    alpha: float = 1.0
    beta: float = 1.5
    lr: float = 0.0001
    stage2_epochs: int = 40
    stage2_batch_size: int = 32
    average: str = "macro"

    def stage1_config(self, mode: str, seed: int, input_dim: int) -> Stage1Config:
        return Stage1Config(
            mode=mode,
            embedder=EmbedderConfig(input_dim, tuple(self.hidden_dims),
                                    self.embedding_dim, seed=seed),
            epochs=self.stage1_epochs,
            batches_per_epoch=self.batches_per_epoch,
            sampler=SamplerConfig(self.patients_per_batch,
                                  self.samples_per_patient, seed=seed),
            margins=MarginSet(self.alpha, self.beta),
            lr=self.lr,
            seed=seed,
        )

    def stage2_config(self, seed: int) -> Stage2Config:
        return Stage2Config(self.stage2_epochs, self.stage2_batch_size,
                            self.lr, seed=seed)


def run_single(cohort, config: ExperimentConfig, mode: str, seed: int):
    """One (mode, seed) cell: split, train, evaluate on the test split.

    Returns (metrics dict, artifacts dict). The patient split is fixed
    by config.split_seed, so every (mode, seed) cell trains and tests
    on identical data; the seed varies only initialization and the
    training-time randomness.
    """
    split = split_by_patient(cohort, config.fractions, seed=config.split_seed)
    train = split.subset(cohort, "train")
    val = split.subset(cohort, "validation")
    test = split.subset(cohort, "test")
    train_os = oversample_minority(train, config.oversample_factor)
    input_dim = len(train[0].features)

    if mode == "baseline":
        params, s2 = train_baseline(
            train_os, EmbedderConfig(input_dim, tuple(config.hidden_dims),
                                     config.embedding_dim, seed=seed),
            config.stage2_config(seed), val_samples=val)
        stage1_logs = []
    elif mode in MODES:
        s1_config = config.stage1_config(mode, seed, input_dim)
        params, stage1_logs, _ = train_stage1(train_os, s1_config,
                                              val_samples=val)
        s2 = train_stage2(params, train_os, config.stage2_config(seed),
                          val_samples=val)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    preds = predict(params, s2.head, test)
    metrics = evaluate_predictions([p for p, _ in preds],
                                   [lab for _, lab in preds],
                                   [s.label for s in test],
                                   average=config.average)
    artifacts = {"params": params, "head": s2.head, "split": split,
                 "stage1_logs": stage1_logs, "stage2": s2}
    return metrics, artifacts


def run_experiment(cohort, config: ExperimentConfig) -> dict[str, MetricsReport]:
    """Comparison of the requested modes over the requested seeds;
    deterministic for fixed (cohort, config)."""
    reports: dict[str, MetricsReport] = {}
    for mode in config.modes:
        per_seed = []
        for seed in config.seeds:
            metrics, _ = run_single(cohort, config, mode, seed)
            per_seed.append(metrics)
        reports[mode] = aggregate_over_seeds(mode, config.seeds, per_seed)
    return reports
