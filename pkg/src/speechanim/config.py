"""Run configuration: nested dataclasses, YAML files, presets, seeding.

A run is described by one document with ``data``, ``encoder``, ``diffusion``,
``model``, ``train`` and ``sample`` sections. Presets pin every published
hyperparameter of the corresponding dataset configuration; CLI flags override
file values, and unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigurationError
from .model import DecoderConfig


@dataclass
class DataSection:
    root: str = ""
    manifest: str = ""
    kind: str = "rig"  # vertex | rig
    policy: str | None = None  # biwi | vocaset | multiface | ratio-80-10-10 | None=use everything
    fps: float = 25.0
    mask: str = ""  # region-mask JSON path
    synthetic_sequences: int = 8
    synthetic_frames: int = 20
    synthetic_dims: int = 30


@dataclass
class EncoderSection:
    name: str = "stub"  # stub | hubert | wav2vec2
    feature_dim: int = 32
    weights_path: str | None = None
    fine_tune: bool = False  # encoders stay frozen unless explicitly enabled

    def __post_init__(self):
        if self.fine_tune:
            raise ConfigurationError("encoder fine-tuning is not supported; weights stay frozen")


@dataclass
class DiffusionSection:
    steps: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    loss: str = "mse"
    enabled: bool = True  # False gives the deterministic no-diffusion baseline


@dataclass
class ModelSection:
    input_embedding_dim: int = 256
    gru_layers: int = 2
    hidden_size: int = 512
    dropout: float = 0.3
    decoder_variant: str = "gru"
    noise_encoder_variant: str = "conv-max"
    timestep_dim: int = 128
    style_after_every_layer: bool = False
    use_style: bool = True


@dataclass
class TrainSection:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_policy: str = "single"
    batch_size: int = 1


@dataclass
class SampleSection:
    steps: int | None = None  # None = all diffusion steps
    seed: int | None = None  # None = derive from the root seed


@dataclass
class RunConfig:
    preset: str = ""
    seed: int = 0
    out_dir: str = "runs/run"
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)

    def decoder_config(self, output_dim: int, n_styles: int) -> DecoderConfig:
        m = self.model
        return DecoderConfig(
            kind=self.data.kind,
            feature_dim=self.encoder.feature_dim,
            output_dim=output_dim,
            n_styles=n_styles if m.use_style else 0,
            input_embedding_dim=m.input_embedding_dim,
            gru_layers=m.gru_layers,
            hidden_size=m.hidden_size,
            dropout=m.dropout,
            decoder_variant=m.decoder_variant,
            noise_encoder_variant=m.noise_encoder_variant if self.data.kind == "vertex" else "none",
            timestep_dim=m.timestep_dim,
            style_after_every_layer=m.style_after_every_layer,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def snapshot(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


_SECTION_TYPES = {
    "data": DataSection,
    "encoder": EncoderSection,
    "diffusion": DiffusionSection,
    "model": ModelSection,
    "train": TrainSection,
    "sample": SampleSection,
}


def _apply_section(obj, doc: dict, prefix: str):
    valid = {f.name for f in dataclasses.fields(obj)}
    for key, value in doc.items():
        if key not in valid:
            raise ConfigurationError(f"unknown config key {prefix}{key}")
        setattr(obj, key, value)


def apply_document(cfg: RunConfig, doc: dict) -> RunConfig:
    """Overlay a parsed YAML/JSON document onto a RunConfig, strictly."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config document must be a mapping")
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigurationError(f"config section {key!r} must be a mapping")
            _apply_section(getattr(cfg, key), value, prefix=f"{key}.")
        elif key in ("preset", "seed", "out_dir"):
            setattr(cfg, key, value)
        else:
            raise ConfigurationError(f"unknown config key {key}")
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Apply dotted-key overrides (e.g. {"diffusion.steps": 100})."""
    doc: dict = {}
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return apply_document(cfg, doc)


def load_config_file(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    return apply_document(base or RunConfig(), doc)


def _vertex_preset(name: str, *, embedding: int, fps: float, policy: str) -> RunConfig:
    cfg = RunConfig(preset=name)
    cfg.data = DataSection(kind="vertex", policy=policy, fps=fps)
    cfg.encoder = EncoderSection(name="hubert", feature_dim=768)
    cfg.diffusion = DiffusionSection(steps=500)
    cfg.model = ModelSection(
        input_embedding_dim=embedding,
        gru_layers=2,
        hidden_size=512,
        dropout=0.3,
        noise_encoder_variant="conv-max",
    )
    cfg.train = TrainSection(learning_rate=1e-4, epochs=50)
    return cfg


def _rig_preset(name: str, *, layers: int, hidden: int, fps: float) -> RunConfig:
    cfg = RunConfig(preset=name)
    cfg.data = DataSection(kind="rig", policy="ratio-80-10-10", fps=fps)
    cfg.encoder = EncoderSection(name="hubert", feature_dim=768)
    cfg.diffusion = DiffusionSection(steps=1000)
    cfg.model = ModelSection(
        gru_layers=layers,
        hidden_size=hidden,
        dropout=0.3,
        noise_encoder_variant="none",
        use_style=False,  # rig data shares one neutral pose, no subject styles
    )
    cfg.train = TrainSection(learning_rate=1e-4, epochs=100)
    return cfg


def _synthetic_preset() -> RunConfig:
    """Desk-scale rig configuration: small widths, short schedule, stub audio."""
    cfg = RunConfig(preset="synthetic", out_dir="runs/synthetic")
    cfg.data = DataSection(kind="rig", policy=None, fps=25.0)
    cfg.encoder = EncoderSection(name="stub", feature_dim=32)
    cfg.diffusion = DiffusionSection(steps=100)
    cfg.model = ModelSection(
        gru_layers=2,
        hidden_size=64,
        dropout=0.0,
        noise_encoder_variant="none",
        timestep_dim=32,
        use_style=True,
    )
    cfg.train = TrainSection(learning_rate=1e-3, epochs=200)
    return cfg


def make_preset(name: str) -> RunConfig:
    if name == "biwi-vertex":
        return _vertex_preset(name, embedding=512, fps=25.0, policy="biwi")
    if name == "vocaset-vertex":
        return _vertex_preset(name, embedding=256, fps=60.0, policy="vocaset")
    if name == "multiface-vertex":
        return _vertex_preset(name, embedding=256, fps=30.0, policy="multiface")
    if name == "beat-rig":
        return _rig_preset(name, layers=2, hidden=256, fps=60.0)
    if name == "uudamm-rig":
        return _rig_preset(name, layers=4, hidden=1024, fps=120.0)
    if name == "synthetic":
        return _synthetic_preset()
    raise ConfigurationError(
        f"unknown preset {name!r}; expected biwi-vertex, vocaset-vertex, multiface-vertex, "
        "beat-rig, uudamm-rig or synthetic"
    )


PRESET_NAMES = (
    "biwi-vertex",
    "vocaset-vertex",
    "multiface-vertex",
    "beat-rig",
    "uudamm-rig",
    "synthetic",
)

# purpose -> spawn index; every subsystem seed derives from the root seed
_SEED_PURPOSES = {"init": 0, "train": 1, "val": 2, "sample": 3, "data": 4}


def subsystem_seed(root_seed: int, purpose: str) -> int:
    """Derive a stable per-subsystem seed from the run's root seed."""
    if purpose not in _SEED_PURPOSES:
        raise ConfigurationError(f"unknown seed purpose {purpose!r}")
    ss = np.random.SeedSequence(entropy=root_seed, spawn_key=(_SEED_PURPOSES[purpose],))
    return int(ss.generate_state(1)[0])
