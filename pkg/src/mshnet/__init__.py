"""Multi-similarity few-shot segmentation at desk scale, on plain numpy.

The public surface groups into:
  tensor / params / gradcheck   -- the differentiable op set and optimizer
  backbone / similarity / model -- feature pyramids, similarity maps, merging net
  data / synth / metrics        -- episodic protocol, synthetic corpus, scoring
  engine / config / cli         -- runs, configuration, command line
"""

from .backbone import (
    FeaturePyramid, MaskPyramid, PyramidBlock, TinyBackboneConfig,
    block_spatial_sizes, downsample_mask, extract_pyramid, init_backbone_params,
    load_pyramid, save_pyramid,
)
from .config import RunConfig, parse_config
from .data import (
    PASCAL_CLASS_NAMES, DatasetIndex, Episode, FoldSpec, ImageEntry,
    build_folds, filter_train_images, read_index, sample_episode, write_index,
)
from .engine import (
    Pipeline, build_index, build_pipeline, build_split, episode_forward,
    run_evaluation, run_training,
)
from .errors import (
    ConfigError, DataError, FormatError, MshnetError, NumericalError,
    ShapeError, StateError, UsageError,
)
from .gradcheck import GradCheckReport, grad_check
from .gradsuite import run_gradient_suite, suite_passed
from .metrics import EvalResult, fb_iou, miou
from .model import (
    HyperFeature, LossReport, ModelConfig, MultiSimilarityNet, SegLogits,
    SimilarityStack, block_conv, combine_losses, init_model_params, merge_conv,
    predict_mask, pyramid_merge, shot_conv, smb_forward, total_loss,
)
from .params import ParamSet, exp_lr_decay, fan_in_uniform, sgd_step
from .serialization import (
    load_checkpoint, load_tensor, save_checkpoint, save_tensor, write_pgm,
)
from .similarity import (
    GpsHead, MaskedFeatureSet, SimilarityMap, cosine_sim, energy_map, gps,
    masked_select, prototype,
)
from .synth import SHAPE_KINDS, make_synthetic_index, render_synthetic, synthetic_loader
from .tensor import Tensor, set_debug_checks

__version__ = "0.1.0"
