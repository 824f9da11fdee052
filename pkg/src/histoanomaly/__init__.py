"""Anomaly detection for histopathology slides over patch embeddings.

Preprocessing (tissue masks, patch grids, Reinhard stain normalization),
outlier-exposure and one-class training heads with hand-derived
gradients, kNN and classifier scoring, top-fraction slide aggregation,
overlap-averaged heatmaps, and AUROC / cross-validation / sensitivity
evaluation. Deep feature extractors are out of scope: embeddings come in
as feature files.
"""

from .tiler import (SlideRaster, TissueMask, TileSpec, PatchCoord,
                    TissueDetectConfig, detect_tissue, enumerate_patches,
                    background_fraction)
from .stainnorm import LabStats, compute_stats, normalize, rgb_to_lab, lab_to_rgb
from .features import (FeatureMatrix, PatchMeta, OeFilterConfig, OeSamplerConfig,
                       cosine_similarity, dedup_oe, sample_batch,
                       read_features, write_features)
from .models import (MlpParams, Layer, TrainConfig, CenterVector, TrainedModel,
                     forward, bce_loss_grad, hsc_loss_grad, deepsad_loss_grad,
                     compactness_loss_grad, autoencoder_loss_grad, sgd_step,
                     finite_diff_check, train, init_mlp,
                     save_checkpoint, load_checkpoint)
from .scoring import (KnnConfig, TtaConfig, AggregationConfig, ScoreTable,
                      HeatmapCanvas, knn_score, classifier_score, tta_score,
                      aggregate_slide, heatmap_accumulate, heatmap_render)
from .evaluation import (LabeledScores, FoldPlan, EvalReport, auroc, make_folds,
                         sensitivity_threshold, group_report,
                         patch_labels_from_annotations)
from .synth import SynthSpec, RasterLayout, gen_features, gen_raster
from .config import PipelineConfig, load_config

__version__ = "0.1.0"
