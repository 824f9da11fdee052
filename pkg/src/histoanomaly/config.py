"""Pipeline configuration: one JSON file, CLI flags win over file values.

Baked-in defaults: 340 px patches, 80% background cutoff, 75 px heatmap
overlap, batch size 32, learning rates 5e-4 (OE) and 1e-2 (one-class,
clipped to 1e-3), momentum 0.9, weight decay 1e-4, cosine dedup threshold
0.9, 10 TTA views, top-10% aggregation, 5 folds.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .evaluation import DEFAULT_FOLDS
from .features import OeFilterConfig, OeSamplerConfig
from .models import TrainConfig
from .scoring import AggregationConfig, KnnConfig, TtaConfig
from .stainnorm import LabStats
from .tiler import TileSpec, TissueDetectConfig

ENV_CONFIG_PATH = "HISTOANOMALY_CONFIG"


@dataclass
class PipelineConfig:
    tile: TileSpec = field(default_factory=TileSpec)
    tissue: TissueDetectConfig = field(default_factory=TissueDetectConfig)
    stain_target: LabStats | None = None
    train: TrainConfig = field(default_factory=lambda: TrainConfig.defaults_for("bce"))
    oe_filter: OeFilterConfig = field(default_factory=OeFilterConfig)
    sampler: OeSamplerConfig = field(default_factory=OeSamplerConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    tta: TtaConfig = field(default_factory=TtaConfig)
    heatmap_overlap: int = 75
    folds: int = DEFAULT_FOLDS

    @property
    def heatmap_tile(self) -> TileSpec:
        return TileSpec.for_heatmap(patch_size=self.tile.patch_size,
                                    overlap=self.heatmap_overlap,
                                    max_background_fraction=self.tile.max_background_fraction)


_SECTIONS = {
    "tile": TileSpec,
    "tissue": TissueDetectConfig,
    "train": None,  # handled via defaults_for
    "oe_filter": OeFilterConfig,
    "sampler": OeSamplerConfig,
    "knn": KnnConfig,
    "aggregation": AggregationConfig,
    "tta": TtaConfig,
}


def load_config(path=None) -> PipelineConfig:
    """Load a PipelineConfig from JSON; missing sections keep defaults.

    With no path, the file named by $HISTOANOMALY_CONFIG is used when set;
    otherwise the built-in defaults.
    """
    if path is None:
        path = os.environ.get(ENV_CONFIG_PATH) or None
    if path is None:
        return PipelineConfig()
    with open(path) as f:
        obj = json.load(f)
    cfg = PipelineConfig()
    for name, cls in _SECTIONS.items():
        if name not in obj:
            continue
        section = dict(obj[name])
        if name == "train":
            objective = section.pop("objective", "bce")
            cfg.train = TrainConfig.defaults_for(objective, **section)
        else:
            setattr(cfg, name, cls(**section))
    if obj.get("stain_target") is not None:
        st = obj["stain_target"]
        cfg.stain_target = LabStats(mean=st["mean"], std=st["std"])
    if "heatmap_overlap" in obj:
        cfg.heatmap_overlap = int(obj["heatmap_overlap"])
    if "folds" in obj:
        cfg.folds = int(obj["folds"])
    return cfg
