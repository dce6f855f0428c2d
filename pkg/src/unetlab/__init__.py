"""U-Net, U-Net^e, UNet+ and UNet++ segmentation networks on a small numpy autodiff engine."""
from .arch import ArchSpec, build, param_count, prune
from .autograd import Graph, finite_diff_check
from .data import Dataset, SynthConfig, gen_synthetic, load_dataset, save_dataset
from .losses import LossConfig, hybrid_loss, segmentation_metrics, two_sample_ttest
from .tensor import Rng
from .trainer import Checkpoint, TrainConfig, evaluate, predict, sliding_window_predict, train

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "build", "param_count", "prune",
    "Graph", "finite_diff_check",
    "Dataset", "SynthConfig", "gen_synthetic", "load_dataset", "save_dataset",
    "LossConfig", "hybrid_loss", "segmentation_metrics", "two_sample_ttest",
    "Rng",
    "Checkpoint", "TrainConfig", "evaluate", "predict", "sliding_window_predict", "train",
]
