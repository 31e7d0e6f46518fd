"""Visual tracker with a frozen reference-token memory, at desk scale.

A from-scratch autodiff tensor core, a transformer encoder whose search
queries attend over frozen reference tokens, an importance-scored
reference token memory, a CenterNet-style prediction head, the
autoregressive tracker, and a synthetic benchmark harness.
"""

from .encoder import EncodeOutput, Encoder, EncoderConfig
from .head import BBox, HeadOutput, PredictionHead, decode_box, focal_loss, giou_loss, total_loss
from .memory import ClassEmbeddings, ReferenceBank, accumulate_importance, collect_topk, integrate, reset_importance, update_bank
from .metrics import MetricReport, compute_metrics
from .optim import AdamW
from .tensor import Graph, Tensor, backward, finite_difference_gradient, no_grad, softmax_rows
from .tracker import TrackerConfig, TrackerModel, TrackState, TrainSample, init, run_sequence, step, train_step

__version__ = "0.1.0"
