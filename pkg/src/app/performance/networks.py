from dataclasses import asdict, dataclass

import torch
from torch import nn

from .exceptions import EmptySequenceError, ShapeMismatchError
from .gmvae import GaussianParams, MixturePrior, reparameterize
from .representation import N_KEYS, N_MELS

FACTORS = ("art", "dyn")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = N_MELS
    hidden_size: int = 128
    num_layers: int = 2
    latent_dim: int = 16
    bidirectional: bool = True

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.hidden_size < self.latent_dim:
            raise ValueError(
                f"hidden_size ({self.hidden_size}) must be >= latent_dim ({self.latent_dim})")


@dataclass(frozen=True)
class DecoderConfig:
    latent_dim: int = 16
    hidden_size: int = 128
    num_layers: int = 2
    output_dim: int = N_MELS
    bidirectional: bool = True

    def __post_init__(self):
        if self.output_dim != N_MELS:
            raise ValueError(f"output_dim must be {N_MELS}, got {self.output_dim}")

    @property
    def input_dim(self):
        return N_KEYS + 2 * self.latent_dim


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 16
    hidden_size: int = 128
    num_layers: int = 2

    def encoder_config(self):
        return EncoderConfig(
            hidden_size=self.hidden_size, num_layers=self.num_layers, latent_dim=self.latent_dim)

    def decoder_config(self):
        return DecoderConfig(
            latent_dim=self.latent_dim, hidden_size=self.hidden_size, num_layers=self.num_layers)

    def to_dict(self):
        return asdict(self)


def _recurrent(input_dim, hidden_size, num_layers, bidirectional):
    rnn = nn.LSTM(
        input_dim, hidden_size, num_layers=num_layers,
        batch_first=True, bidirectional=bidirectional,
    )
    return rnn, hidden_size * (2 if bidirectional else 1)


class PosteriorEncoder(nn.Module):
    """q(z | X): bidirectional LSTM over Mel frames, per-frame mean and log-variance heads."""

    def __init__(self, config=EncoderConfig()):
        super().__init__()
        self.config = config
        self.rnn, width = _recurrent(
            config.input_dim, config.hidden_size, config.num_layers, config.bidirectional)
        self.mean_head = nn.Linear(width, config.latent_dim)
        self.log_variance_head = nn.Linear(width, config.latent_dim)

    def forward(self, X):
        unbatched = X.dim() == 2
        if unbatched:
            X = X.unsqueeze(0)
        if X.shape[-2] == 0:
            raise EmptySequenceError("cannot encode an empty spectrogram")
        if X.shape[-1] != self.config.input_dim:
            raise ShapeMismatchError(
                f"expected {self.config.input_dim} Mel bins, got {X.shape[-1]}")

        hidden, _ = self.rnn(X)
        q = GaussianParams(self.mean_head(hidden), self.log_variance_head(hidden))
        if unbatched:
            q = GaussianParams(q.mean.squeeze(0), q.log_variance.squeeze(0))
        return q


class SpectrogramDecoder(nn.Module):
    """p(X | Y_onset, z_art, z_dyn): per-frame concat -> bidirectional LSTM -> 80 bins."""

    def __init__(self, config=DecoderConfig()):
        super().__init__()
        self.config = config
        self.rnn, width = _recurrent(
            config.input_dim, config.hidden_size, config.num_layers, config.bidirectional)
        self.projection = nn.Linear(width, config.output_dim)

    def forward(self, onset_roll, z_art, z_dyn):
        lengths = {
            "onset_roll": onset_roll.shape[-2],
            "z_art": z_art.shape[-2],
            "z_dyn": z_dyn.shape[-2],
        }
        if len(set(lengths.values())) != 1:
            raise ShapeMismatchError(f"frame counts differ: {lengths}")
        if lengths["onset_roll"] == 0:
            raise EmptySequenceError("cannot decode an empty sequence")

        inputs = torch.cat([onset_roll.to(z_art.dtype), z_art, z_dyn], dim=-1)
        unbatched = inputs.dim() == 2
        if unbatched:
            inputs = inputs.unsqueeze(0)
        hidden, _ = self.rnn(inputs)
        X_hat = self.projection(hidden)
        return X_hat.squeeze(0) if unbatched else X_hat


class PerformanceVAE(nn.Module):
    """Both posterior encoders, the decoder and the two mixture priors."""

    def __init__(self, config=ModelConfig()):
        super().__init__()
        self.config = config
        self.encoders = nn.ModuleDict({
            factor: PosteriorEncoder(config.encoder_config()) for factor in FACTORS
        })
        self.decoder = SpectrogramDecoder(config.decoder_config())
        self.priors = nn.ModuleDict({
            factor: MixturePrior(config.latent_dim) for factor in FACTORS
        })

    def encode(self, X, which):
        if which not in FACTORS:
            raise ValueError(f"unknown factor '{which}', expected one of {FACTORS}")
        return self.encoders[which](X)

    def decode(self, onset_roll, z_art, z_dyn):
        return self.decoder(onset_roll, z_art, z_dyn)

    def prior(self, which):
        if which not in FACTORS:
            raise ValueError(f"unknown factor '{which}', expected one of {FACTORS}")
        return self.priors[which]

    def forward(self, X, onset_roll, noise_art, noise_dyn):
        q_art = self.encode(X, "art")
        q_dyn = self.encode(X, "dyn")
        z_art = reparameterize(q_art, noise_art)
        z_dyn = reparameterize(q_dyn, noise_dyn)
        return self.decode(onset_roll, z_art, z_dyn), (q_art, q_dyn), (z_art, z_dyn)

    def sample_noise(self, shape, generator=None):
        reference = self.priors["art"].means
        return torch.randn(shape, generator=generator, dtype=reference.dtype, device=reference.device)
