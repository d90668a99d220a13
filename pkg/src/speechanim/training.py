"""Optimization loop, validation and checkpointing.

Training draws a uniform timestep per step, noises the clean sequence with
the closed-form forward process, and regresses it back. Batches are single
sequences (variable lengths make padding wasteful at this scale); an optional
bucket policy groups same-length sequences and averages their gradients into
one optimizer step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .audio import align_to_frames, encode_audio
from .data import DatasetEntry
from .diffusion import NoiseSchedule, q_sample_closed_form, training_loss
from .errors import ConfigurationError, NumericDivergenceError
from .model import MotionDenoiser, save_checkpoint, load_checkpoint, restore_optimizer


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_policy: str = "single"  # single | bucket
    batch_size: int = 1
    seed: int = 0
    device: str = "cpu"
    loss: str = "mse"
    val_seed: int = 1234  # fixed so validation loss is comparable across epochs

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        if self.batch_policy not in ("single", "bucket"):
            raise ConfigurationError(f"unknown batch policy {self.batch_policy!r}")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val: float = float("inf")
    epoch_losses: list = field(default_factory=list)


class PreparedItem(NamedTuple):
    """A sequence ready for the model: aligned features, motion, style index."""

    features: np.ndarray  # (N, F) float32
    motion: np.ndarray  # (N, D) float32
    style: int | None
    subject: str
    sentence: str


def style_map_for(entries: list[DatasetEntry]) -> dict[str, int]:
    """Stable subject -> style-row assignment (sorted subject order)."""
    return {s: i for i, s in enumerate(sorted({e.subject for e in entries}))}


def prepare_items(
    entries: list[DatasetEntry],
    backend,
    style_map: dict[str, int] | None,
) -> list[PreparedItem]:
    items = []
    for e in entries:
        feats = align_to_frames(encode_audio(e.audio, backend), e.motion.n_frames)
        style = style_map.get(e.subject) if style_map is not None else None
        items.append(
            PreparedItem(
                features=feats.astype(np.float32),
                motion=e.motion.frames,
                style=style,
                subject=e.subject,
                sentence=e.sentence,
            )
        )
    return items


def _forward_loss(
    item: PreparedItem,
    sched: NoiseSchedule,
    model: MotionDenoiser,
    rng: np.random.Generator,
    *,
    loss_kind: str,
    diffusion_enabled: bool,
) -> torch.Tensor:
    if diffusion_enabled:
        t = int(rng.integers(1, sched.steps + 1))
        x_t = q_sample_closed_form(item.motion, t, sched, rng).x_t
    else:
        # ablation baseline: same network, no noising, level-0 conditioning
        t = 0
        x_t = np.zeros_like(item.motion, dtype=np.float64)
    p = next(model.parameters())
    audio = torch.as_tensor(item.features, dtype=p.dtype)
    x_t_t = torch.as_tensor(x_t.astype(np.float32), dtype=p.dtype)
    x_0 = torch.as_tensor(item.motion, dtype=p.dtype)
    x_hat = model(audio, x_t_t, t, item.style)
    return training_loss(x_0, x_hat, loss_kind)


def train_step(
    batch: PreparedItem | list[PreparedItem],
    sched: NoiseSchedule,
    model: MotionDenoiser,
    optimizer: torch.optim.Optimizer,
    state: TrainState,
    rng: np.random.Generator,
    *,
    loss_kind: str = "mse",
    diffusion_enabled: bool = True,
) -> float:
    """One optimizer step over a single sequence (or a same-length bucket)."""
    items = batch if isinstance(batch, list) else [batch]
    model.train()
    optimizer.zero_grad()
    total = None
    for item in items:
        loss = _forward_loss(
            item, sched, model, rng, loss_kind=loss_kind, diffusion_enabled=diffusion_enabled
        )
        total = loss if total is None else total + loss
    total = total / len(items)
    value = float(total.detach())
    if not np.isfinite(value):
        raise NumericDivergenceError(
            f"non-finite training loss at step {state.step} "
            f"({items[0].subject}/{items[0].sentence})"
        )
    total.backward()
    optimizer.step()
    state.step += 1
    state.epoch_losses.append(value)
    return value


def evaluate_loss(
    items: list[PreparedItem],
    model: MotionDenoiser,
    sched: NoiseSchedule,
    *,
    seed: int,
    loss_kind: str = "mse",
    diffusion_enabled: bool = True,
) -> float:
    """Mean reconstruction loss over a subset with frozen parameters.

    Timestep/noise draws are seeded per item, so the result is reproducible
    and equals the mean of independently recomputed per-item losses.
    """
    model.eval()
    losses = []
    with torch.no_grad():
        for i, item in enumerate(items):
            rng = np.random.default_rng((seed, i))
            loss = _forward_loss(
                item, sched, model, rng, loss_kind=loss_kind, diffusion_enabled=diffusion_enabled
            )
            losses.append(float(loss))
    return float(np.mean(losses))


def _buckets(items: list[PreparedItem], batch_size: int, order: np.ndarray) -> list[list[PreparedItem]]:
    """Group same-length sequences, preserving the shuffled order."""
    out: list[list[PreparedItem]] = []
    open_buckets: dict[int, list[PreparedItem]] = {}
    for idx in order:
        item = items[int(idx)]
        n = item.motion.shape[0]
        bucket = open_buckets.setdefault(n, [])
        bucket.append(item)
        if len(bucket) >= batch_size:
            out.append(open_buckets.pop(n))
    out.extend(b for b in open_buckets.values() if b)
    return out


def fit(
    train_items: list[PreparedItem],
    val_items: list[PreparedItem],
    model: MotionDenoiser,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    out_dir: str | Path,
    *,
    diffusion_enabled: bool = True,
    resume: str | Path | None = None,
    log_name: str = "train_log.csv",
    static_extra: dict | None = None,
) -> Path:
    """Run the training loop; returns the path of the best checkpoint.

    Writes ``best.ckpt`` (lowest validation loss), ``last.ckpt`` and a CSV
    log with one row per epoch. ``resume`` continues from a last-checkpoint:
    the step counter carries on and no epoch is repeated.
    """
    if not train_items:
        raise ConfigurationError("training split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    log_path = out_dir / log_name

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    state = TrainState()
    rng = np.random.default_rng((cfg.seed, 1))
    torch.manual_seed(np.random.SeedSequence((cfg.seed, 2)).generate_state(1)[0])
    start_epoch = 0
    if resume is not None:
        prev_model, doc = load_checkpoint(resume, expected_config=model.cfg)
        model.load_state_dict(prev_model.state_dict())
        restore_optimizer(optimizer, doc)
        state.epoch = doc["epoch"]
        state.step = doc["step"]
        state.best_val = doc["extra"].get("best_val", float("inf"))
        start_epoch = doc["epoch"]
        saved_rng = doc["extra"].get("np_rng_state")
        if saved_rng is not None:
            rng.bit_generator.state = saved_rng
        saved_torch = doc["extra"].get("torch_rng_state")
        if saved_torch is not None:
            torch.set_rng_state(torch.tensor(saved_torch, dtype=torch.uint8))

    new_log = not (resume is not None and log_path.exists())
    log_fh = open(log_path, "w" if new_log else "a")
    if new_log:
        log_fh.write("epoch,step,train_loss,val_loss,wall_seconds\n")

    t0 = time.monotonic()
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            state.epoch = epoch
            state.epoch_losses = []
            order = rng.permutation(len(train_items))
            if cfg.batch_policy == "bucket" and cfg.batch_size > 1:
                batches: list = _buckets(train_items, cfg.batch_size, order)
            else:
                batches = [train_items[int(i)] for i in order]
            for batch in batches:
                try:
                    train_step(
                        batch,
                        sched,
                        model,
                        optimizer,
                        state,
                        rng,
                        loss_kind=cfg.loss,
                        diffusion_enabled=diffusion_enabled,
                    )
                except NumericDivergenceError:
                    save_checkpoint(
                        out_dir / "diverged.ckpt",
                        model,
                        epoch=epoch,
                        step=state.step,
                        optimizer=optimizer,
                        extra={"diverged": True},
                    )
                    raise
            train_loss = float(np.mean(state.epoch_losses))
            val_loss = (
                evaluate_loss(
                    val_items,
                    model,
                    sched,
                    seed=cfg.val_seed,
                    loss_kind=cfg.loss,
                    diffusion_enabled=diffusion_enabled,
                )
                if val_items
                else train_loss
            )
            extra = {
                "best_val": min(state.best_val, val_loss),
                "np_rng_state": rng.bit_generator.state,
                "torch_rng_state": torch.get_rng_state().tolist(),
                "train_loss": train_loss,
                "val_loss": val_loss,
                **(static_extra or {}),
            }
            save_checkpoint(
                last_path, model, epoch=epoch, step=state.step, optimizer=optimizer, extra=extra
            )
            if val_loss < state.best_val:
                state.best_val = val_loss
                save_checkpoint(
                    best_path, model, epoch=epoch, step=state.step, optimizer=optimizer, extra=extra
                )
            log_fh.write(
                f"{epoch},{state.step},{train_loss:.8f},{val_loss:.8f},{time.monotonic() - t0:.3f}\n"
            )
            log_fh.flush()
    finally:
        log_fh.close()
    if not best_path.exists():  # every epoch diverged before validation
        save_checkpoint(best_path, model, epoch=state.epoch, step=state.step, optimizer=optimizer)
    return best_path
