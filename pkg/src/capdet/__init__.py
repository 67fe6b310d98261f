"""capdet: joint image captioning and object detection on a shared backbone.

A single image encoder (patch embedding + windowed/shifted-window attention
+ patch merging) feeds two parallel heads: a two-stage detector (FPN, RPN,
RoI head) and an autoregressive caption decoder with cross-attention.  The
two task losses are combined as ``total = detection + lambda * caption`` and
trained jointly end to end.
"""

from .caption_head import beam_search, caption_loss, greedy_decode
from .checkpoint import load_checkpoint, save_checkpoint
from .detect_head import detect, detection_loss
from .metrics import bleu, cider, coco_map, evaluate, rouge_l
from .model import MultitaskModel, ParameterPartition, build_model
from .scenegen import SceneConfig, Vocabulary, generate_dataset
from .trainer import TrainConfig, joint_loss, lambda_sweep, train

__version__ = "0.1.0"

__all__ = [
    "MultitaskModel", "ParameterPartition", "build_model",
    "TrainConfig", "train", "lambda_sweep", "joint_loss",
    "caption_loss", "greedy_decode", "beam_search",
    "detect", "detection_loss",
    "bleu", "rouge_l", "cider", "coco_map", "evaluate",
    "save_checkpoint", "load_checkpoint",
    "SceneConfig", "Vocabulary", "generate_dataset",
    "__version__",
]
