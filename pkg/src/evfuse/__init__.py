"""Plug-and-play event/image feature fusion on synthetic scenes.

Pipeline: render deterministic moving-shape scenes with exact ground
truth, derive event streams from the contrast-threshold generation model,
pretrain and freeze a small image model, then train an event encoder plus
cross-attention fusion block that corrects degraded image features and
extends inference to event-rate timestamps.
"""

from .scenes import (CircularPath, FlowField, Frame, Label, LinearPath,
                     SceneProfile, SceneSpec, SceneSpecError, ShapeSpec,
                     ground_truth_flow, render_scene, sample_scene_spec)
from .events import (Event, EventStream, EventStreamError, VoxelGrid,
                     generate_events, integrate_events, read_events,
                     slice_stream, split_equal, voxelize, write_events)
from .degrade import (DegradeError, DegradeSchedule, DegradeSpec, apply_degrade,
                      degrade_blur, degrade_exposure)
from .encoders import (BaseModel, ConvEncoder, EncoderConfig, PretrainConfig,
                       check_architecture_sharing, im_encode, parameter_digest,
                       pretrain_base, task_head)
from .fusion import (CrossAttentionFusion, FusionConfig, PlugModule, ev_encode,
                     fuse, fuse_no_iter, iterate_sequence)
from .losses import (LossReport, LossWeights, gram, recon_loss, style_loss,
                     task_loss, total_loss)
from .training import TrainConfig, TrainSample, build_sample, train, train_step
from .evaluation import (CONDITIONS, EVAL_MODES, MetricsReport, ablate, emit_report,
                       evaluate, evaluate_all_modes)

__version__ = "0.1.0"
