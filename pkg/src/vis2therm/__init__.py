"""Visible-to-thermal LSGAN data augmentation for thermal pedestrian detection."""

from .config import ExperimentConfig
from .data import BoundingBox, DatasetManifest, FrameRecord, load_manifest, write_manifest
from .detector import Detection, DetectorConfig
from .evaluation import EvalReport, evaluate, log_average_miss_rate, match_frame, mr_fppi_curve
from .finetune import FineTuneSchedule, PedestrianDetector, fine_tune, learning_rate
from .gan import DiscriminatorConfig, GeneratorConfig
from .mixture import MixtureSpec, build_mixture, synthesize_dataset
from .perceptual import FeatureExtractor
from .translator import GanHyperParams, ThermalTranslator, train_gan

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "DatasetManifest",
    "Detection",
    "DetectorConfig",
    "DiscriminatorConfig",
    "EvalReport",
    "ExperimentConfig",
    "FeatureExtractor",
    "FineTuneSchedule",
    "FrameRecord",
    "GanHyperParams",
    "GeneratorConfig",
    "MixtureSpec",
    "PedestrianDetector",
    "ThermalTranslator",
    "build_mixture",
    "evaluate",
    "fine_tune",
    "learning_rate",
    "load_manifest",
    "log_average_miss_rate",
    "match_frame",
    "mr_fppi_curve",
    "synthesize_dataset",
    "train_gan",
    "write_manifest",
]
