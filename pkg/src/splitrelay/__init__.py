"""Split learning across a chain of trainers with private labels, DP cut
activations and chained per-segment watermarks."""

from .dp import DpActivationBatch, DpParams, clip_l1, protect
from .labelspace import LabelMap, build_label_map, demask, expand_dataset
from .nn import Segment, init_segment, segment_backward, segment_forward
from .pipeline import estimate_latency, negotiate, run_training, train_monolithic
from .plan import EmbedConfig, ExperimentPlan, Seeds
from .verifier import VerificationReport, assemble, verify_chain
from .watermark import EmbeddingFailure, WatermarkLink, embed, embed_chain

__version__ = "0.1.0"
