"""Few-shot segmentation by dense query-support attention over multi-scale features.

Support masks are aggregated per query pixel with attention weights computed
between query and support features at several backbone scales, then fused
and decoded into a foreground probability map.
"""

from . import kernels
from .attention import dcama_unit, multi_head_dcama, scaled_dot_product_attention
from .episodes import Episode, ToyDatasetConfig, generate_toy_dataset, load_dataset, make_folds, sample_episode
from .evaluation import MetricAccumulator, bce_loss, fb_iou, miou_finalize, train_step
from .pipeline import ModelConfig, ModelWeights, forward, forward_one_shot, predict_mask
from .tensor import NonFiniteError, ShapeError, Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"
