"""
Inference-time rendering: gradual style morphing, style transfer from a
reference performance, prior sampling, Mel-to-audio inversion and figures.
"""

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import librosa
import numpy as np
import soundfile as sf
import torch
from matplotlib.figure import Figure

from .exceptions import EmptySequenceError, NonFiniteError, ShapeMismatchError
from .gmvae import N_COMPONENTS, conditional_prior, reparameterize, responsibilities
from .networks import FACTORS
from .representation import LOG_FLOOR_VALUE

logger = logging.getLogger(__name__)

GRIFFIN_LIM_ITERATIONS = 64
PSEUDO_INVERSE_RIDGE = 1e-4
STYLE_MODES = ("mean", "sample")
# frames whose loudest bin is this far (nats) above the log floor count as sounding
SOUNDING_MARGIN = 3.0


@dataclass(frozen=True)
class MorphSpec:
    """
    Interpolate `factor` from one mixture component to the other while the
    remaining factor stays put. `fixed_other` is either a component index or
    an explicit (T, D) latent sequence.
    """

    factor: str
    from_component: int = 0
    to_component: int = 1
    fixed_other: object = 0

    def __post_init__(self):
        if self.factor not in FACTORS:
            raise ValueError(f"unknown factor '{self.factor}', expected one of {FACTORS}")
        for name in ("from_component", "to_component"):
            if getattr(self, name) not in range(N_COMPONENTS):
                raise ValueError(f"{name} must be 0 or 1, got {getattr(self, name)}")
        if self.from_component == self.to_component:
            raise ValueError(
                f"morphing {self.factor} from component {self.from_component} to itself is a no-op")
        if not torch.is_tensor(self.fixed_other) and self.fixed_other not in range(N_COMPONENTS):
            raise ValueError(f"fixed_other must be 0, 1 or a latent sequence, got {self.fixed_other!r}")

    @property
    def other_factor(self):
        return FACTORS[1 - FACTORS.index(self.factor)]

    @property
    def label(self):
        other = "z" if torch.is_tensor(self.fixed_other) else self.fixed_other
        return f"{self.factor} {self.from_component}->{self.to_component}, {self.other_factor}={other}"


# Four panels of the morph figure: {art, dyn} x {0->1} with the other factor held at each component.
FIGURE_SCENARIOS = (
    MorphSpec("art", 0, 1, fixed_other=0),
    MorphSpec("art", 0, 1, fixed_other=1),
    MorphSpec("dyn", 0, 1, fixed_other=0),
    MorphSpec("dyn", 0, 1, fixed_other=1),
)


# ---------------------------------------------------------------------------
# Latent trajectories
# ---------------------------------------------------------------------------

def morph_latents(prior, spec, T):
    """z_t = mu_from + (mu_to - mu_from) * t / T for t = 0..T-1 (never quite reaches mu_to)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    with torch.no_grad():
        start = prior.means[spec.from_component]
        end = prior.means[spec.to_component]
        t = torch.arange(T, dtype=start.dtype).unsqueeze(-1) / T
        return start + (end - start) * t


def constant_latents(prior, component, T):
    with torch.no_grad():
        return prior.means[component].expand(T, -1).clone()


def interpolated_latents(prior, position, T):
    """Hold the point `position` of the way from component 0 to component 1 for all T frames."""
    with torch.no_grad():
        point = prior.means[0] + (prior.means[1] - prior.means[0]) * position
        return point.expand(T, -1).clone()


def scenario_latents(model, spec, T):
    """(z_art, z_dyn) for a morph scenario."""
    moving = morph_latents(model.prior(spec.factor), spec, T)
    if torch.is_tensor(spec.fixed_other):
        other = spec.fixed_other.to(moving.dtype)
        if other.shape != moving.shape:
            raise ShapeMismatchError(
                f"fixed {spec.other_factor} latents {tuple(other.shape)}, expected {tuple(moving.shape)}")
    else:
        other = constant_latents(model.prior(spec.other_factor), spec.fixed_other, T)
    return (moving, other) if spec.factor == "art" else (other, moving)


@dataclass
class StyleLatents:
    z_art: torch.Tensor
    z_dyn: torch.Tensor

    @property
    def length(self):
        return self.z_art.shape[0]

    def aligned(self, target_T):
        return StyleLatents(align_latents(self.z_art, target_T), align_latents(self.z_dyn, target_T))


def infer_style(model, X_style, mode="mean", seed=0):
    """Latents of a reference performance at its own length (see StyleLatents.aligned)."""
    if mode not in STYLE_MODES:
        raise ValueError(f"unknown style mode '{mode}', expected one of {STYLE_MODES}")
    model.eval()
    X = torch.as_tensor(np.asarray(X_style), dtype=model.prior("art").means.dtype)
    with torch.no_grad():
        q_art = model.encode(X, "art")
        q_dyn = model.encode(X, "dyn")
        if mode == "mean":
            return StyleLatents(q_art.mean, q_dyn.mean)
        generator = torch.Generator().manual_seed(seed)
        noise_art = model.sample_noise(q_art.mean.shape, generator)
        noise_dyn = model.sample_noise(q_dyn.mean.shape, generator)
        return StyleLatents(reparameterize(q_art, noise_art), reparameterize(q_dyn, noise_dyn))


def align_latents(z, target_T):
    """Nearest-neighbour frame resampling; frame i takes source frame floor(i * T / target_T)."""
    T = z.shape[0]
    if T == 0:
        raise EmptySequenceError("cannot align an empty latent sequence")
    if target_T < 1:
        raise ValueError(f"target_T must be >= 1, got {target_T}")
    index = torch.div(torch.arange(target_T) * T, target_T, rounding_mode="floor")
    return z[index]


def sample_prior_latents(prior, c, seed=0):
    """One draw from p(z | c) per frame."""
    p = conditional_prior(c, prior)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        noise = torch.randn(p.mean.shape, generator=generator, dtype=p.mean.dtype)
        return reparameterize(p, noise)


def style_responsibilities(z, prior):
    """Frame-averaged p(c | z), shape (2,)."""
    with torch.no_grad():
        return responsibilities(z, prior).mean(0)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def synthesize(Y_onset, z_art, z_dyn, decoder):
    """Decoder forward pass; (T, 80) float32 log-Mel."""
    reference = next(decoder.parameters())
    onset = torch.as_tensor(np.asarray(Y_onset), dtype=reference.dtype)
    decoder.eval()
    with torch.no_grad():
        X_hat = decoder(onset, z_art.to(reference.dtype), z_dyn.to(reference.dtype))
    return X_hat.cpu().numpy().astype(np.float32)


def reconstruction_loss(X, X_hat):
    """Squared error summed over bins, averaged over frames."""
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise ShapeMismatchError(f"X {X.shape} vs X_hat {X_hat.shape}")
    return float(((X_hat - X) ** 2).sum(-1).mean())


def transfer(model, Y_onset, X_style, mode="mean", seed=0):
    """Render the content onset roll with the style performance's latents."""
    style = infer_style(model, X_style, mode=mode, seed=seed)
    T = np.asarray(Y_onset).shape[0]
    if style.length != T:
        logger.info(f"Resampling style latents from {style.length} to {T} frames")
        style = style.aligned(T)
    return synthesize(Y_onset, style.z_art, style.z_dyn, model.decoder), style


def interpolation_sweep(model, Y_onset, factor, n_points=8, other_component=1):
    """Spectrograms with `factor` held at evenly spaced points between its two components."""
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    other_factor = FACTORS[1 - FACTORS.index(factor)]
    T = np.asarray(Y_onset).shape[0]
    other = constant_latents(model.prior(other_factor), other_component, T)
    positions = np.linspace(0.0, 1.0, n_points)
    rendered = []
    for position in positions:
        moving = interpolated_latents(model.prior(factor), float(position), T)
        z_art, z_dyn = (moving, other) if factor == "art" else (other, moving)
        rendered.append(synthesize(Y_onset, z_art, z_dyn, model.decoder))
    return positions, rendered


# ---------------------------------------------------------------------------
# Spectrogram statistics
# ---------------------------------------------------------------------------

def frame_energy(mel):
    return np.exp(np.asarray(mel, dtype=np.float64)).sum(-1)


def mean_frame_energy(mel):
    return float(frame_energy(mel).mean())


def note_sustain_frames(mel, onset_roll, margin=SOUNDING_MARGIN):
    """
    Mean number of sounding frames per note: each onset frame opens a segment
    running to the next onset frame, and a frame sounds when its loudest bin
    exceeds the log floor by `margin`.
    """
    mel = np.asarray(mel)
    starts = np.flatnonzero(np.asarray(onset_roll).any(-1))
    if starts.size == 0:
        return 0.0
    sounding = mel.max(-1) > LOG_FLOOR_VALUE + margin
    bounds = np.append(starts, mel.shape[0])
    return float(np.mean([sounding[a:b].sum() for a, b in zip(bounds[:-1], bounds[1:])]))


# ---------------------------------------------------------------------------
# Mel inversion
# ---------------------------------------------------------------------------

def mel_to_linear(mel, grid, ridge=PSEUDO_INVERSE_RIDGE):
    """Log-Mel (T, n_mels) -> linear magnitude (n_freq, T) via a ridge-regularized pseudo-inverse."""
    basis = grid.mel_filterbank().astype(np.float64)
    gram = basis @ basis.T
    gram += ridge * np.trace(gram) / gram.shape[0] * np.eye(gram.shape[0])
    inverse = np.linalg.solve(gram, basis).T
    linear = inverse @ np.exp(np.asarray(mel, dtype=np.float64).T)
    return np.maximum(linear, 0.0)


def griffin_lim(linear, grid, n_iterations=GRIFFIN_LIM_ITERATIONS, seed=0):
    """Plain alternating projection from a seeded random phase, uncentered frames."""
    return librosa.griffinlim(
        linear,
        n_iter=n_iterations,
        hop_length=grid.hop_length,
        win_length=grid.window_length,
        window="hann",
        center=False,
        momentum=0.0,
        init="random",
        random_state=seed,
    )


def mel_to_audio(mel, grid, n_iterations=GRIFFIN_LIM_ITERATIONS, seed=0):
    """Float32 samples, T * hop long, aligned with the analysis frames of mel_spectrogram."""
    mel = np.asarray(mel)
    if n_iterations < 1:
        raise ValueError(f"n_iterations must be >= 1, got {n_iterations}")
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise EmptySequenceError(f"expected a non-empty (T, n_mels) spectrogram, got {mel.shape}")
    if not np.isfinite(mel).all():
        raise NonFiniteError("mel", "spectrogram contains non-finite values")
    signal = griffin_lim(mel_to_linear(mel, grid), grid, n_iterations, seed)
    pad = (grid.window_length - grid.hop_length) // 2
    return signal[pad:pad + mel.shape[0] * grid.hop_length].astype(np.float32)


def spectral_convergence(linear, signal, grid):
    """||S - |STFT(signal)||| / ||S|| over the frames of S."""
    rebuilt = np.abs(librosa.stft(
        signal, n_fft=grid.window_length, hop_length=grid.hop_length,
        win_length=grid.window_length, window="hann", center=False))
    rebuilt = rebuilt[:, :linear.shape[1]]
    return float(np.linalg.norm(linear - rebuilt) / max(np.linalg.norm(linear), 1e-12))


def dominant_frequency(audio, grid):
    """Centre frequency of the analysis bin with the largest frame-averaged magnitude."""
    magnitude = np.abs(librosa.stft(
        np.asarray(audio, dtype=np.float32), n_fft=grid.window_length, hop_length=grid.hop_length,
        win_length=grid.window_length, window="hann", center=False))
    return float(np.argmax(magnitude.mean(-1)) * grid.sample_rate / grid.window_length)


def rms_dbfs(audio):
    rms = math.sqrt(float(np.mean(np.square(np.asarray(audio, dtype=np.float64)))))
    return 20.0 * math.log10(max(rms, 1e-12))


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def _atomic(path, writer):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    writer(tmp)
    os.replace(tmp, path)
    return path


def write_wav(path, audio, sample_rate):
    """16-bit PCM."""
    clipped = np.clip(np.asarray(audio, dtype=np.float32), -1.0, 1.0)
    return _atomic(path, lambda tmp: sf.write(tmp, clipped, sample_rate, subtype="PCM_16", format="WAV"))


def save_latents(path, z_art, z_dyn, **extra):
    arrays = {
        "z_art": torch.as_tensor(z_art).detach().cpu().numpy(),
        "z_dyn": torch.as_tensor(z_dyn).detach().cpu().numpy(),
        **{k: np.asarray(v) for k, v in extra.items()},
    }

    def write(tmp):
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)

    return _atomic(path, write)


def emit_figure(panels, labels, path, title=None):
    """
    Spectrogram heatmaps (time on x, Mel bin on y) sharing one colour scale.
    Four panels are laid out 2x2, anything else in a single row.
    """
    if not panels:
        raise ValueError("need at least one panel")
    if len(labels) != len(panels):
        raise ValueError(f"{len(panels)} panels but {len(labels)} labels")

    n = len(panels)
    nrows, ncols = (2, 2) if n == 4 else (1, n)
    arrays = [np.asarray(p, dtype=np.float32) for p in panels]
    vmin = min(float(a.min()) for a in arrays)
    vmax = max(float(a.max()) for a in arrays)

    fig = Figure(figsize=(4.5 * ncols, 3.2 * nrows))
    axes = fig.subplots(nrows, ncols, squeeze=False)
    for ax, mel, label in zip(axes.flat, arrays, labels):
        ax.imshow(mel.T, origin="lower", aspect="auto", interpolation="nearest",
                  cmap="magma", vmin=vmin, vmax=vmax)
        ax.set_title(label, fontsize=9)
        ax.set_xlabel("frame")
        ax.set_ylabel("Mel bin")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _atomic(path, lambda tmp: fig.savefig(tmp, format="png", dpi=100, metadata={"Software": None}))
