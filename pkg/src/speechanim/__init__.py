"""Speech-driven 3D facial animation with a denoising-diffusion model.

Subpackages: data ingestion and synthetic fixtures (``data``), speech feature
extraction (``audio``), the diffusion process (``diffusion``), the denoising
network (``model``), the training loop (``training``), objective metrics
(``metrics``), run configuration (``config``) and the CLI (``cli``).
"""

from .data import (
    AnimationSequence,
    AudioClip,
    DatasetEntry,
    DatasetSplit,
    RegionMask,
    TemplateMesh,
    generate_synthetic_dataset,
    load_rig_dataset,
    load_vertex_dataset,
    make_split,
)
from .audio import SpeechFeatureSequence, align_to_frames, encode_audio, make_backend, stub_encode
from .diffusion import (
    DiffusionSample,
    NoiseSchedule,
    build_linear_schedule,
    q_sample_closed_form,
    q_sample_step,
    sample_loop,
    training_loss,
)
from .model import (
    DecoderConfig,
    MotionDenoiser,
    StyleCondition,
    apply_style,
    build_decoder_variant,
    load_checkpoint,
    save_checkpoint,
)
from .metrics import MetricReport, animation_graphs, diversity, fdd, lve, mean_motion_stats, mve
from .training import TrainConfig, TrainState, evaluate_loss, fit, prepare_items, train_step

__version__ = "0.1.0"
