"""Point cloud semantic segmentation with adaptive local aggregation and multi-level VLAD."""
from .config import PRESETS, NetworkConfig, RunConfig, TrainConfig, load_config, miniature_config, toy_config
from .errors import (
    CheckpointError,
    DimensionError,
    NonFiniteError,
    ParseError,
    UsageError,
    ValidationError,
)
from .losses_metrics import ConfusionMatrix, aggregation_loss, class_weights, constraint_loss, weighted_cross_entropy
from .network import SegmentationNet, predict, prepare_batch
from .pointcloud_io import (
    PointCloud,
    SyntheticSceneSpec,
    crop_batch,
    generate_synthetic_scene,
    read_ascii_cloud,
    write_ascii_cloud,
)
from .training import RunLog, adam_step, evaluate, train

__version__ = "0.1.0"
