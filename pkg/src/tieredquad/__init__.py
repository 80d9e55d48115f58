"""Patient-tiered quadruplet metric learning for imbalanced binary
lesion classification.

Capabilities: a numpy embedding network with exact analytic gradients
and Adam; triplet and tiered quadruplet losses; online patient-specific
mining with random-hard selection; per-patient dynamic margins from
2-means clustering; synthetic two-tier cohorts with patient-level
splits; a two-stage training pipeline with a frozen-backbone classifier
head; and the comparative evaluation harness (confusion metrics, rank
AUC, embedding export, 2-D projection).
"""

from .cohort import (GeneratorConfig, LesionSample, SplitSpec,
                     generate_cohort, inspect_cohort, load_cohort,
                     oversample_minority, save_cohort, split_by_patient)
from .embedder import (AdamState, EmbedderConfig, EmbedderParams, adam_step,
                       backward, embed, embed_batch, grad_check, init_params,
                       load_checkpoint, save_checkpoint)
from .evaluation import (ConfusionMatrix, MetricsReport, basic_metrics,
                         confusion, evaluate_predictions, export_embeddings,
                         pca_2d, roc_auc)
from .losses import (LossBreakdown, MarginSet, batch_triplet_loss,
                     dmt_quad_loss, euclidean_distance,
                     loss_grad_wrt_embeddings, tiered_quad_loss,
                     tiered_quad_term, triplet_term)
from .margins import DynamicMargin, KMeansResult, dynamic_margin, kmeans2
from .mining import (CandidateTriplet, MiniBatch, MiningStats, Quadruplet,
                     SamplerConfig, classify_triplet, enumerate_ap_pairs,
                     mine_quadruplets, mine_triplets, mine_triplets_naive,
                     sample_minibatch, select_random_hard)
from .pipeline import (ClassifierHead, ExperimentConfig, Stage1Config,
                       Stage2Config, cross_entropy, predict, run_experiment,
                       run_single, train_baseline, train_stage1, train_stage2)

__version__ = "0.1.0"
