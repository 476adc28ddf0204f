"""
Training loop for the performance VAE.

Replay is exact by construction: the crops of step k and the reparameterization
noise of step k are pure functions of (seed, k), so a run resumed from a
checkpoint sees the same data and noise as an uninterrupted one.
"""

import csv
import json
import logging
import os
import pickle
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .exceptions import CheckpointError, ConfigError, CropError
from .gmvae import condition_accuracy, conditional_prior, elbo_loss, kl_diag_gaussian, kl_weight
from .networks import ModelConfig, PerformanceVAE
from .representation import crop_piece, window_frames

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_PATTERN = "checkpoint-{step:07d}.pt"
METRICS_FILE = "metrics.csv"
EVAL_FILE = "eval.csv"
METRICS_COLUMNS = ["step", "recon", "kl_art", "kl_dyn", "ce_art", "ce_dyn", "acc_art", "acc_dyn"]
EVAL_COLUMNS = ["step", "recon", "kl_art", "kl_dyn", "acc_art", "acc_dyn", "n_frames"]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    max_steps: int = 20000
    kl_warmup_fraction: float = 0.25
    ce_weight: float = 1.0
    crop_seconds: float = 20.0
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 1000
    log_every: int = 50
    grad_clip: float = 5.0
    latent_dim: int = 16
    hidden_size: int = 128
    num_layers: int = 2
    detach_ce_latent: bool = False

    def __post_init__(self):
        positive = ("batch_size", "learning_rate", "max_steps", "crop_seconds", "eval_every",
                    "checkpoint_every", "log_every", "grad_clip", "latent_dim", "hidden_size",
                    "num_layers")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.kl_warmup_fraction <= 1:
            raise ConfigError(f"kl_warmup_fraction must be in [0, 1], got {self.kl_warmup_fraction}")
        if self.ce_weight < 0:
            raise ConfigError(f"ce_weight must be non-negative, got {self.ce_weight}")
        # per-step generators pack (seed, step) into one 64-bit torch seed
        if not 0 <= self.seed < 2 ** 32:
            raise ConfigError(f"seed must be in [0, 2**32), got {self.seed}")
        if self.max_steps >= 2 ** 32:
            raise ConfigError(f"max_steps must be below 2**32, got {self.max_steps}")

    def model_config(self):
        return ModelConfig(
            latent_dim=self.latent_dim, hidden_size=self.hidden_size, num_layers=self.num_layers)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainState:
    model: PerformanceVAE
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0


def init_state(config):
    torch.manual_seed(config.seed)
    model = PerformanceVAE(config.model_config())
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return TrainState(model=model, optimizer=optimizer, config=config)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def collate(crops, dtype=torch.float32):
    return {
        "X": torch.as_tensor(np.stack([c.mel for c in crops]), dtype=dtype),
        "Y_onset": torch.as_tensor(np.stack([c.onset for c in crops]), dtype=dtype),
        "c_art": torch.as_tensor(np.stack([c.c_art for c in crops]), dtype=torch.long),
        "c_dyn": torch.as_tensor(np.stack([c.c_dyn for c in crops]), dtype=torch.long),
    }


def usable_pieces(pieces, config, grid):
    length = window_frames(config.crop_seconds, grid)
    usable = [p for p in pieces if p.n_frames >= length]
    for piece in pieces:
        if piece.n_frames < length:
            logger.warning(
                f"Skipping {piece.name}: {piece.n_frames} frames < {length}-frame crop window")
    if not usable:
        raise CropError(f"no piece is long enough for {config.crop_seconds}s crops")
    return usable


def make_batch(pieces, config, grid, step):
    """Crops for training step `step`; the epoch's order and crop starts come from RNG(seed, epoch)."""
    length = window_frames(config.crop_seconds, grid)
    size = min(config.batch_size, len(pieces))
    batches_per_epoch = len(pieces) // size
    epoch, position = divmod(step, batches_per_epoch)

    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(pieces))
    starts = [int(rng.integers(0, p.n_frames - length + 1)) for p in pieces]

    chosen = order[position * size:(position + 1) * size]
    return collate([crop_piece(pieces[i], starts[i], config.crop_seconds, grid) for i in chosen])


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def step_generator(seed, step):
    return torch.Generator().manual_seed((seed << 32) + step)


def compute_loss(model, batch, beta, ce_weight, generator=None, detach_ce_latent=False):
    X = batch["X"]
    latent_shape = X.shape[:-1] + (model.config.latent_dim,)
    noise_art = model.sample_noise(latent_shape, generator)
    noise_dyn = model.sample_noise(latent_shape, generator)
    X_hat, (q_art, q_dyn), (z_art, z_dyn) = model(X, batch["Y_onset"], noise_art, noise_dyn)
    return elbo_loss(
        X, X_hat, q_art, q_dyn, batch["c_art"], batch["c_dyn"],
        model.prior("art"), model.prior("dyn"), beta, ce_weight,
        z_art=z_art, z_dyn=z_dyn, detach_ce_latent=detach_ce_latent,
    )


def train_step(batch, state):
    """One Adam step on the penalized lower bound; raises NonFiniteError before updating."""
    config = state.config
    state.model.train()
    beta = kl_weight(state.step, config.max_steps, config.kl_warmup_fraction)
    losses = compute_loss(
        state.model, batch, beta, config.ce_weight,
        generator=step_generator(config.seed, state.step),
        detach_ce_latent=config.detach_ce_latent,
    )

    state.optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    nn.utils.clip_grad_norm_(state.model.parameters(), config.grad_clip)
    state.optimizer.step()
    state.step += 1
    return state, losses.detach()


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationMetrics:
    recon: float
    kl_art: float
    kl_dyn: float
    condition_accuracy_art: float
    condition_accuracy_dyn: float
    n_frames: int

    @classmethod
    def combine(cls, parts):
        """Frame-weighted average of shard metrics."""
        parts = list(parts)
        total = sum(p.n_frames for p in parts)
        if total == 0:
            raise ValueError("cannot combine metrics over zero frames")
        averaged = {
            name: sum(getattr(p, name) * p.n_frames for p in parts) / total
            for name in ("recon", "kl_art", "kl_dyn",
                         "condition_accuracy_art", "condition_accuracy_dyn")
        }
        return cls(**averaged, n_frames=total)

    def as_dict(self):
        return asdict(self)


def _piece_tensors(model, piece):
    dtype = model.prior("art").means.dtype
    return (
        torch.as_tensor(piece.mel, dtype=dtype),
        torch.as_tensor(piece.onset, dtype=dtype),
        torch.as_tensor(piece.c_art, dtype=torch.long),
        torch.as_tensor(piece.c_dyn, dtype=torch.long),
    )


def evaluate_piece(model, piece):
    """Metrics of one whole piece with z set to the posterior means."""
    X, onset, c_art, c_dyn = _piece_tensors(model, piece)
    with torch.no_grad():
        q_art = model.encode(X, "art")
        q_dyn = model.encode(X, "dyn")
        X_hat = model.decode(onset, q_art.mean, q_dyn.mean)
        recon = ((X_hat - X) ** 2).sum(-1).mean()
        kl_art = kl_diag_gaussian(q_art, conditional_prior(c_art, model.prior("art"))).mean()
        kl_dyn = kl_diag_gaussian(q_dyn, conditional_prior(c_dyn, model.prior("dyn"))).mean()
    return EvaluationMetrics(
        recon=float(recon),
        kl_art=float(kl_art),
        kl_dyn=float(kl_dyn),
        condition_accuracy_art=condition_accuracy(q_art.mean, c_art, model.prior("art")),
        condition_accuracy_dyn=condition_accuracy(q_dyn.mean, c_dyn, model.prior("dyn")),
        n_frames=piece.n_frames,
    )


def evaluate(pieces, state):
    if not pieces:
        raise ValueError("cannot evaluate an empty split")
    model = state.model if isinstance(state, TrainState) else state
    model.eval()
    return EvaluationMetrics.combine(evaluate_piece(model, piece) for piece in pieces)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state, path):
    """Atomic torch archive plus a JSON echo of the config next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "step": state.step,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "config": state.config.to_dict(),
        "rng_state": torch.get_rng_state(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)

    echo = path.with_suffix(".json")
    tmp = echo.with_name(echo.name + ".tmp")
    tmp.write_text(json.dumps(
        {"format_version": CHECKPOINT_VERSION, "step": state.step, "config": state.config.to_dict()},
        indent=2, sort_keys=True))
    os.replace(tmp, echo)
    logger.info(f"Saved checkpoint at step {state.step} to {path}")
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError,
            zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path} is not a checkpoint")
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has format version {version}, expected {CHECKPOINT_VERSION}")

    try:
        config = TrainConfig.from_dict(payload["config"])
        model = PerformanceVAE(config.model_config())
        model.load_state_dict(payload["model"])
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        optimizer.load_state_dict(payload["optimizer"])
        step = int(payload["step"])
        rng_state = payload["rng_state"]
    except (KeyError, RuntimeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"{path} is incomplete or inconsistent: {e}") from e

    torch.set_rng_state(rng_state)
    return TrainState(model=model, optimizer=optimizer, config=config, step=step)


def latest_checkpoint(out_dir):
    found = sorted(Path(out_dir).glob("checkpoint-*.pt"))
    return found[-1] if found else None


# ---------------------------------------------------------------------------
# Metrics files
# ---------------------------------------------------------------------------

def _append_row(path, columns, row):
    new_file = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(columns)
        writer.writerow([row[c] for c in columns])


def append_metrics(path, step, losses):
    row = {"step": step, **{k: repr(v) for k, v in losses.as_floats().items()}}
    _append_row(Path(path), METRICS_COLUMNS, row)


def append_eval(path, step, metrics):
    row = {
        "step": step,
        "recon": repr(metrics.recon),
        "kl_art": repr(metrics.kl_art),
        "kl_dyn": repr(metrics.kl_dyn),
        "acc_art": repr(metrics.condition_accuracy_art),
        "acc_dyn": repr(metrics.condition_accuracy_dyn),
        "n_frames": metrics.n_frames,
    }
    _append_row(Path(path), EVAL_COLUMNS, row)


def truncate_after(path, step):
    """Drop rows logged after `step` (left behind by an interrupted run)."""
    path = Path(path)
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return
    header, body = rows[0], rows[1:]
    kept = [r for r in body if int(r[0]) <= step]
    if len(kept) == len(body):
        return
    logger.warning(f"Dropping {len(body) - len(kept)} rows after step {step} from {path.name}")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        csv.writer(fh).writerows([header, *kept])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def fit(state, train_pieces, grid, out_dir, eval_pieces=None, on_checkpoint=None):
    """Train until config.max_steps; metrics.csv gets one row per completed step."""
    config = state.config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / METRICS_FILE
    eval_path = out_dir / EVAL_FILE
    truncate_after(metrics_path, state.step)
    truncate_after(eval_path, state.step)

    pieces = usable_pieces(train_pieces, config, grid)
    logger.info(
        f"Training on {len(pieces)} pieces from step {state.step} to {config.max_steps}")

    while state.step < config.max_steps:
        batch = make_batch(pieces, config, grid, state.step)
        state, losses = train_step(batch, state)
        append_metrics(metrics_path, state.step, losses)

        if state.step % config.log_every == 0:
            values = losses.as_floats()
            logger.info(
                f"step {state.step}: total={values['total']:.4f} recon={values['recon']:.4f} "
                f"kl=({values['kl_art']:.3f}, {values['kl_dyn']:.3f}) "
                f"ce=({values['ce_art']:.3f}, {values['ce_dyn']:.3f}) beta={losses.beta:.3f}")

        if eval_pieces and state.step % config.eval_every == 0:
            metrics = evaluate(eval_pieces, state)
            append_eval(eval_path, state.step, metrics)
            logger.info(
                f"eval at step {state.step}: recon={metrics.recon:.4f} "
                f"acc_art={metrics.condition_accuracy_art:.3f} "
                f"acc_dyn={metrics.condition_accuracy_dyn:.3f}")

        if state.step % config.checkpoint_every == 0 or state.step == config.max_steps:
            path = save_checkpoint(state, out_dir / CHECKPOINT_PATTERN.format(step=state.step))
            if on_checkpoint is not None:
                on_checkpoint(state, path, losses)

    return state
