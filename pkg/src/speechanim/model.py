"""The denoising network: audio + noised motion + timestep -> clean motion.

Vertex data is high dimensional, so a noise encoder first projects the noised
motion into a low dimensional per-frame latent; rig data skips that step. The
latent, the aligned audio features and a sinusoidal timestep embedding are
concatenated per frame and decoded by a recurrent (or transformer) core whose
hidden states may be modulated by a learned multiplicative style embedding
before the final affine projection back to motion space.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, ContractError, FormatError, NumericDivergenceError

DECODER_VARIANTS = ("gru", "rnn", "transformer-tf", "transformer-ar")
NOISE_ENCODER_VARIANTS = ("mlp", "conv-max", "conv-avg", "conv-max-x3", "conv-avg-x3", "none")

CHECKPOINT_MAGIC = b"CKP1"


@dataclass
class DecoderConfig:
    kind: str = "rig"  # vertex | rig
    feature_dim: int = 32  # F, width of aligned audio features
    output_dim: int = 30  # D, motion width (3V for vertex, C for rig)
    n_styles: int = 0  # rows of the style embedding table, 0 disables style
    input_embedding_dim: int = 256  # E, noise latent width (vertex only)
    gru_layers: int = 2  # stacked layers, reused as depth for all variants
    hidden_size: int = 256
    dropout: float = 0.3
    decoder_variant: str = "gru"
    noise_encoder_variant: str = "none"
    timestep_dim: int = 128
    style_after_every_layer: bool = False

    def __post_init__(self):
        if self.kind not in ("vertex", "rig"):
            raise ConfigurationError(f"decoder kind must be vertex|rig, got {self.kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.decoder_variant not in DECODER_VARIANTS:
            raise ConfigurationError(
                f"unknown decoder variant {self.decoder_variant!r}, expected {DECODER_VARIANTS}"
            )
        if self.noise_encoder_variant not in NOISE_ENCODER_VARIANTS:
            raise ConfigurationError(
                f"unknown noise encoder variant {self.noise_encoder_variant!r}"
            )
        if self.kind == "vertex" and self.noise_encoder_variant == "none":
            raise ConfigurationError("vertex models need a noise encoder variant other than 'none'")
        if self.kind == "rig" and self.noise_encoder_variant != "none":
            raise ConfigurationError("rig models use the noised motion directly; set variant 'none'")
        for name in ("feature_dim", "output_dim", "gru_layers", "hidden_size", "timestep_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    @property
    def latent_dim(self) -> int:
        """Width of the noised-motion branch after encoding."""
        return self.input_embedding_dim if self.kind == "vertex" else self.output_dim

    @property
    def fused_dim(self) -> int:
        return self.feature_dim + self.latent_dim + self.timestep_dim


def config_hash(cfg: DecoderConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class StyleCondition:
    """One-hot subject selector plus the learned embedding table it indexes."""

    onehot: np.ndarray
    embedding_table: object  # (S, H) array or tensor, owned by the model

    def __post_init__(self):
        self.onehot = np.asarray(self.onehot)
        active = np.flatnonzero(self.onehot)
        if len(active) != 1:
            raise ContractError(f"style one-hot must have exactly one active entry, got {len(active)}")
        if self.onehot.shape[0] != self.embedding_table.shape[0]:
            raise ContractError(
                f"one-hot length {self.onehot.shape[0]} does not match table rows "
                f"{self.embedding_table.shape[0]}"
            )

    @property
    def index(self) -> int:
        return int(np.flatnonzero(self.onehot)[0])

    @classmethod
    def from_index(cls, index: int, embedding_table) -> "StyleCondition":
        n = embedding_table.shape[0]
        if not 0 <= index < n:
            raise ContractError(f"style index {index} outside [0, {n})")
        onehot = np.zeros(n, dtype=np.float32)
        onehot[index] = 1.0
        return cls(onehot=onehot, embedding_table=embedding_table)


def apply_style(hidden, style: StyleCondition):
    """Multiply every hidden-state row elementwise by the selected style row."""
    row = style.embedding_table[style.index]
    if hidden.shape[-1] != row.shape[-1]:
        raise ContractError(
            f"hidden width {hidden.shape[-1]} does not match style width {row.shape[-1]}"
        )
    return hidden * row


def timestep_embedding(t: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Sinusoidal encoding of an integer diffusion timestep.

    Half sine / half cosine over geometrically spaced frequencies; distinct
    timesteps below 10^4 map to distinct vectors.
    """
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    angles = float(t) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros(1, dtype=emb.dtype)])
    return emb.to(dtype=dtype, device=device)


def fuse_inputs(audio: torch.Tensor, noise_latent: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
    """Per-frame concatenation [audio | latent | timestep], t_emb broadcast."""
    if audio.shape[0] != noise_latent.shape[0]:
        raise ContractError(
            f"temporal lengths differ: audio {audio.shape[0]} vs latent {noise_latent.shape[0]}"
        )
    t_rows = t_emb.unsqueeze(0).expand(audio.shape[0], -1)
    return torch.cat([audio, noise_latent, t_rows], dim=1)


def _pool_features(x: torch.Tensor, mode: str) -> torch.Tensor:
    """Window-2 stride-2 pooling along the feature axis of an (N, C) tensor."""
    pooled = x.unsqueeze(1)  # (N, 1, C)
    if mode == "max":
        pooled = torch.nn.functional.max_pool1d(pooled, kernel_size=2, stride=2)
    else:
        pooled = torch.nn.functional.avg_pool1d(pooled, kernel_size=2, stride=2)
    return pooled.squeeze(1)


class _ConvPoolBlock(nn.Module):
    """Temporal window-3 Conv1d followed by window-2 pooling over features."""

    def __init__(self, channels: int, pool: str):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, kernel_size=3, padding=1)
        self.pool = pool

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (N, C)
        y = self.conv(x.t().unsqueeze(0)).squeeze(0).t()  # convolve along time
        y = torch.tanh(y)
        return _pool_features(y, self.pool)


class NoiseEncoder(nn.Module):
    """Projects high dimensional noised vertex frames to an E-wide latent.

    Variants: a 2-layer MLP, or a per-frame affine layer followed by one or
    three (Conv1d + pool) blocks. Feature-axis pooling halves the width per
    block, so the affine layer targets E * 2^blocks. Temporal length is
    always preserved.
    """

    def __init__(self, input_dim: int, latent_dim: int, variant: str):
        super().__init__()
        self.variant = variant
        self.blocks = nn.ModuleList()
        if variant == "mlp":
            self.lift = nn.Linear(input_dim, 2 * latent_dim)
            self.head = nn.Linear(2 * latent_dim, latent_dim)
            return
        self.head = None
        n_blocks = 3 if variant.endswith("x3") else 1
        pool = "max" if "max" in variant else "avg"
        self.lift = nn.Linear(input_dim, latent_dim * (2**n_blocks))
        for i in range(n_blocks):
            self.blocks.append(_ConvPoolBlock(latent_dim * (2 ** (n_blocks - i)), pool))

    def forward(self, x_t: torch.Tensor) -> torch.Tensor:  # (N, D) -> (N, E)
        y = self.lift(x_t)
        if self.variant == "mlp":
            return self.head(torch.tanh(y))
        for block in self.blocks:
            y = block(y)
        return y


def _sinusoidal_positions(n: int, dim: int, dtype, device) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    angles = pos * freqs.unsqueeze(0)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, :half] = torch.sin(angles)
    pe[:, half : 2 * half] = torch.cos(angles)
    return pe.to(dtype=dtype, device=device)


def _transformer_heads(hidden: int) -> int:
    for h in (8, 4, 2):
        if hidden % h == 0:
            return h
    return 1


class MotionDenoiser(nn.Module):
    """Full denoising model; see the module docstring for the data flow."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.kind == "vertex":
            self.noise_encoder = NoiseEncoder(cfg.output_dim, cfg.input_embedding_dim, cfg.noise_encoder_variant)
        else:
            self.noise_encoder = None
        w, h = cfg.fused_dim, cfg.hidden_size

        variant = cfg.decoder_variant
        if variant in ("gru", "rnn"):
            rnn_cls = nn.GRU if variant == "gru" else nn.RNN
            self.layers = nn.ModuleList(
                rnn_cls(w if i == 0 else h, h, num_layers=1, batch_first=True)
                for i in range(cfg.gru_layers)
            )
            self.inter_dropout = nn.Dropout(cfg.dropout)
        else:
            self.in_proj = nn.Linear(w, h)
            self.layers = nn.ModuleList(
                nn.TransformerEncoderLayer(
                    d_model=h,
                    nhead=_transformer_heads(h),
                    dim_feedforward=4 * h,
                    dropout=cfg.dropout,
                    activation="gelu",
                    batch_first=True,
                )
                for _ in range(cfg.gru_layers)
            )
            if variant == "transformer-ar":
                self.prev_proj = nn.Linear(cfg.output_dim, h)

        if cfg.n_styles > 0:
            # multiplicative embedding, initialised near the identity
            self.style_table = nn.Parameter(1.0 + 0.5 * (torch.rand(cfg.n_styles, h) * 2.0 - 1.0))
        else:
            self.style_table = None
        self.out_proj = nn.Linear(h, cfg.output_dim)

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    def encode_noise(self, x_t: torch.Tensor) -> torch.Tensor:
        """Noised-motion branch: learned projection for vertex data.

        Rig models feed the noised controls through unchanged, so calling the
        encoder for them is a contract violation.
        """
        if self.noise_encoder is None:
            raise ContractError("rig models have no noise encoder; the noised motion passes through")
        return self.noise_encoder(x_t)

    def _style_row(self, style) -> torch.Tensor | None:
        if style is None:
            return None
        if self.style_table is None:
            raise ContractError("model was built without style rows (n_styles=0)")
        if isinstance(style, StyleCondition):
            index = style.index
        else:
            index = int(style)
        if not 0 <= index < self.cfg.n_styles:
            raise ContractError(f"style index {index} outside [0, {self.cfg.n_styles})")
        return self.style_table[index]

    def _modulate(self, hidden: torch.Tensor, row: torch.Tensor | None) -> torch.Tensor:
        return hidden if row is None else hidden * row

    def forward(self, audio: torch.Tensor, x_t: torch.Tensor, t: int, style=None) -> torch.Tensor:
        if audio.shape[0] != x_t.shape[0]:
            raise ContractError(
                f"audio has {audio.shape[0]} frames but noised motion has {x_t.shape[0]}"
            )
        cfg = self.cfg
        latent = self.encode_noise(x_t) if cfg.kind == "vertex" else x_t
        t_emb = timestep_embedding(t, cfg.timestep_dim, dtype=audio.dtype, device=audio.device)
        fused = fuse_inputs(audio, latent, t_emb)
        row = self._style_row(style)

        if cfg.decoder_variant == "transformer-ar":
            hidden = self._autoregressive_hidden(fused, row)
            return self._project(hidden, row)
        hidden = self._parallel_hidden(fused, row)
        return self._project(hidden, row)

    def _project(self, hidden: torch.Tensor, row) -> torch.Tensor:
        hidden = self._modulate(hidden, row)
        out = self.out_proj(hidden)
        if not torch.isfinite(out).all():
            raise NumericDivergenceError("non-finite activations in the output projection")
        return out

    def _parallel_hidden(self, fused: torch.Tensor, row) -> torch.Tensor:
        cfg = self.cfg
        if cfg.decoder_variant in ("gru", "rnn"):
            h = fused.unsqueeze(0)  # (1, N, W)
            for i, layer in enumerate(self.layers):
                h, _ = layer(h)
                if cfg.style_after_every_layer and i < len(self.layers) - 1:
                    h = self._modulate(h, row)
                if i < len(self.layers) - 1:
                    h = self.inter_dropout(h)
            return h.squeeze(0)
        n = fused.shape[0]
        h = self.in_proj(fused) + _sinusoidal_positions(n, cfg.hidden_size, fused.dtype, fused.device)
        mask = nn.Transformer.generate_square_subsequent_mask(n).to(dtype=fused.dtype, device=fused.device)
        h = h.unsqueeze(0)
        for i, layer in enumerate(self.layers):
            h = layer(h, src_mask=mask)
            if cfg.style_after_every_layer and i < len(self.layers) - 1:
                h = self._modulate(h, row)
        return h.squeeze(0)

    def _autoregressive_hidden(self, fused: torch.Tensor, row) -> torch.Tensor:
        """Frame-by-frame decoding, feeding each predicted frame back in."""
        cfg = self.cfg
        n = fused.shape[0]
        pos = _sinusoidal_positions(n, cfg.hidden_size, fused.dtype, fused.device)
        base = self.in_proj(fused) + pos
        prev = torch.zeros(cfg.output_dim, dtype=fused.dtype, device=fused.device)
        tokens: list[torch.Tensor] = []
        hidden_rows: list[torch.Tensor] = []
        for i in range(n):
            tokens.append(base[i] + self.prev_proj(prev))
            seq = torch.stack(tokens).unsqueeze(0)
            mask = nn.Transformer.generate_square_subsequent_mask(i + 1).to(
                dtype=fused.dtype, device=fused.device
            )
            h = seq
            for j, layer in enumerate(self.layers):
                h = layer(h, src_mask=mask)
                if cfg.style_after_every_layer and j < len(self.layers) - 1:
                    h = self._modulate(h, row)
            hidden_i = h[0, i]
            hidden_rows.append(hidden_i)
            prev = self.out_proj(self._modulate(hidden_i, row))
        return torch.stack(hidden_rows)

    def predict(self, audio: np.ndarray, x_t: np.ndarray, t: int, style=None) -> np.ndarray:
        """Inference adapter over numpy arrays; eval mode, no gradients."""
        was_training = self.training
        self.eval()
        try:
            p = next(self.parameters())
            with torch.no_grad():
                out = self.forward(
                    torch.as_tensor(np.asarray(audio, dtype=np.float32), dtype=p.dtype),
                    torch.as_tensor(np.asarray(x_t, dtype=np.float32), dtype=p.dtype),
                    t,
                    style,
                )
            return out.cpu().numpy().astype(np.float64)
        finally:
            self.train(was_training)


def decode_sequence(fused: torch.Tensor, style, model: MotionDenoiser) -> torch.Tensor:
    """Run the decoder core and output head on already-fused inputs."""
    row = model._style_row(style)
    if model.cfg.decoder_variant == "transformer-ar":
        hidden = model._autoregressive_hidden(fused, row)
    else:
        hidden = model._parallel_hidden(fused, row)
    return model._project(hidden, row)


def build_decoder_variant(cfg: DecoderConfig, seed: int = 0) -> MotionDenoiser:
    """Construct a model with deterministic (seeded) initialisation."""
    torch.manual_seed(seed)
    return MotionDenoiser(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- checkpoint container -------------------------------------------------
#
# magic, u32 header length, JSON header, then raw little-endian tensor bytes
# in the header's listed order. Deterministic: identical state produces an
# identical file.


def _tensor_entries(named: dict[str, np.ndarray]) -> tuple[list[dict], list[bytes]]:
    metas, blobs = [], []
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name])
        metas.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(arr.tobytes())
    return metas, blobs


def save_checkpoint(
    path: str | Path,
    model: MotionDenoiser,
    *,
    epoch: int = 0,
    step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> None:
    params = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    opt_arrays: dict[str, np.ndarray] = {}
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        opt_meta = {"param_groups": sd["param_groups"], "state_keys": {}}
        for pid, st in sd["state"].items():
            keys = []
            for key, value in st.items():
                if isinstance(value, torch.Tensor):
                    opt_arrays[f"{pid}.{key}"] = value.detach().cpu().numpy()
                    keys.append([key, "tensor"])
                else:
                    keys.append([key, value])
            opt_meta["state_keys"][str(pid)] = keys
    p_metas, p_blobs = _tensor_entries(params)
    o_metas, o_blobs = _tensor_entries(opt_arrays)
    header = {
        "config": asdict(model.cfg),
        "config_hash": config_hash(model.cfg),
        "epoch": int(epoch),
        "step": int(step),
        "has_optimizer": optimizer is not None,
        "optimizer_meta": opt_meta,
        "params": p_metas,
        "opt_params": o_metas,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in p_blobs + o_blobs:
            fh.write(chunk)


def read_checkpoint(path: str | Path) -> dict:
    """Read a checkpoint into a dict of header fields plus named arrays."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for meta in header["params"] + header["opt_params"]:
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            dtype = np.dtype(meta["dtype"])
            buf = fh.read(count * dtype.itemsize)
            arrays[meta["name"]] = np.frombuffer(buf, dtype=dtype).reshape(meta["shape"]).copy()
    header["arrays"] = arrays
    return header


def load_checkpoint(
    path: str | Path, *, expected_config: DecoderConfig | None = None
) -> tuple[MotionDenoiser, dict]:
    """Rebuild a model from a checkpoint; reject config-hash mismatches."""
    doc = read_checkpoint(path)
    cfg = DecoderConfig(**doc["config"])
    if doc["config_hash"] != config_hash(cfg):
        raise ConfigurationError(f"{path}: config hash does not match its stored config")
    if expected_config is not None and config_hash(expected_config) != doc["config_hash"]:
        raise ConfigurationError(
            f"{path}: checkpoint config hash {doc['config_hash'][:12]} does not match "
            "the requested configuration"
        )
    model = MotionDenoiser(cfg)
    n_params = len(doc["params"])
    state = {
        meta["name"]: torch.as_tensor(doc["arrays"][meta["name"]])
        for meta in doc["params"]
    }
    model.load_state_dict(state)
    return model, doc


def restore_optimizer(optimizer: torch.optim.Optimizer, doc: dict) -> None:
    if not doc.get("has_optimizer"):
        return
    meta = doc["optimizer_meta"]
    state = {}
    for pid_str, keys in meta["state_keys"].items():
        pid = int(pid_str)
        st = {}
        for key, kindval in keys:
            if kindval == "tensor":
                st[key] = torch.as_tensor(doc["arrays"][f"{pid}.{key}"])
            else:
                st[key] = kindval
        state[pid] = st
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
