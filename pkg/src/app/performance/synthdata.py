"""
Synthetic toy-piano corpus with exactly controlled articulation and dynamics.

Pieces come in groups of four sharing one melody, one piece per style cell
(staccato/legato x soft/loud), so that only the style differs inside a group.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from .representation import (
    DYNAMICS_THRESHOLD,
    PIANO_HIGH,
    PIANO_LOW,
    ConditionSequence,
    NoteEvent,
    arrays_from_performance,
    note_span,
)

logger = logging.getLogger(__name__)

ARTICULATIONS = ("staccato", "legato")
DYNAMICS = ("soft", "loud")
STYLE_CELLS = tuple((a, d) for a in ARTICULATIONS for d in DYNAMICS)

N_HARMONICS = 4
DECAY_PER_SECOND = 3.0
RELEASE_S = 0.010
MAX_AMPLITUDE = 0.25

MELODY_LOW = 48
MELODY_HIGH = 84
MELODY_MAX_STEP = 3


@dataclass(frozen=True)
class StyleSpec:
    articulation_mode: str = "legato"
    dynamics_mode: str = "soft"
    staccato_duration: float = 0.1
    soft_velocity: tuple = (40, 60)
    loud_velocity: tuple = (85, 110)
    inter_onset: float = 0.5

    def __post_init__(self):
        if self.articulation_mode not in ARTICULATIONS:
            raise ValueError(f"unknown articulation '{self.articulation_mode}'")
        if self.dynamics_mode not in DYNAMICS:
            raise ValueError(f"unknown dynamics '{self.dynamics_mode}'")
        soft_low, soft_high = self.soft_velocity
        loud_low, loud_high = self.loud_velocity
        if not (1 <= soft_low <= soft_high <= DYNAMICS_THRESHOLD < loud_low <= loud_high <= 127):
            raise ValueError(
                f"velocity ranges must straddle {DYNAMICS_THRESHOLD}: "
                f"soft {self.soft_velocity}, loud {self.loud_velocity}")
        if not 0 < self.staccato_duration < self.inter_onset:
            raise ValueError("staccato_duration must be positive and below the inter-onset interval")

    @property
    def cell(self):
        return f"{self.articulation_mode}-{self.dynamics_mode}"

    @property
    def velocity_range(self):
        return self.loud_velocity if self.dynamics_mode == "loud" else self.soft_velocity


@dataclass
class ToyPiece:
    name: str
    events: list
    audio: np.ndarray
    style: StyleSpec
    seed: int
    group: int

    def to_arrays(self, grid):
        return arrays_from_performance(self.events, self.audio, grid, name=self.name)

    def intended_conditions(self, grid, n_frames):
        """Labels the style asks for: held while a note sounds, loud iff the cell is loud."""
        c_art = np.zeros(n_frames, dtype=np.uint8)
        for event in self.events:
            start, end = note_span(event, grid, n_frames)
            c_art[start:end] = 1
        c_dyn = c_art.copy() if self.style.dynamics_mode == "loud" else np.zeros_like(c_art)
        return ConditionSequence(c_art, c_dyn)


def pitch_frequency(pitch):
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def render_toy_note(pitch, duration_s, velocity, grid, max_amplitude=MAX_AMPLITUDE):
    """
    Four decaying harmonics (1/k rolloff), gated at `duration_s` with a 10 ms
    linear release. Peak amplitude is max_amplitude * velocity / 127.
    """
    if not PIANO_LOW <= pitch <= PIANO_HIGH:
        raise ValueError(f"pitch {pitch} outside the piano range")
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")

    sr = grid.sample_rate
    length = int(round((duration_s + RELEASE_S) * sr))
    t = np.arange(length) / sr
    f0 = pitch_frequency(pitch)

    wave = np.zeros(length)
    for k in range(1, N_HARMONICS + 1):
        if k * f0 >= sr / 2:
            continue
        wave += np.sin(2 * np.pi * k * f0 * t) / k
    wave *= np.exp(-DECAY_PER_SECOND * t)
    wave *= np.clip((duration_s + RELEASE_S - t) / RELEASE_S, 0.0, 1.0)

    peak = np.abs(wave).max()
    if peak > 0:
        wave *= max_amplitude * velocity / 127 / peak
    return wave.astype(np.float32)


def _melody(seed, group, n_notes):
    rng = np.random.default_rng([seed, group])
    pitches = [int(rng.integers(MELODY_LOW, MELODY_HIGH + 1))]
    for step in rng.integers(-MELODY_MAX_STEP, MELODY_MAX_STEP + 1, size=n_notes - 1):
        pitch = pitches[-1] + int(step)
        # reflect at the range edges
        if pitch > MELODY_HIGH:
            pitch = 2 * MELODY_HIGH - pitch
        elif pitch < MELODY_LOW:
            pitch = 2 * MELODY_LOW - pitch
        pitches.append(pitch)
    return pitches


def generate_piece(seed, index, piece_length_s, grid, base_style=StyleSpec()):
    articulation, dynamics = STYLE_CELLS[index % len(STYLE_CELLS)]
    group = index // len(STYLE_CELLS)
    style = replace(base_style, articulation_mode=articulation, dynamics_mode=dynamics)

    ioi = style.inter_onset
    # every onset leaves room for a sounding note plus its release
    onset_limit = piece_length_s - 2 * RELEASE_S
    n_notes = int(np.ceil(onset_limit / ioi - 1e-9))
    pitches = _melody(seed, group, n_notes)
    velocity_rng = np.random.default_rng([seed, index, 1])
    low, high = style.velocity_range

    events = []
    for k, pitch in enumerate(pitches):
        onset = k * ioi
        if articulation == "staccato":
            offset = onset + style.staccato_duration
        else:
            offset = (k + 1) * ioi
        offset = min(offset, piece_length_s - RELEASE_S)
        velocity = int(velocity_rng.integers(low, high + 1))
        events.append(NoteEvent(pitch, onset, offset, velocity))

    n_samples = int(round(piece_length_s * grid.sample_rate))
    audio = np.zeros(n_samples, dtype=np.float32)
    for event in events:
        note = render_toy_note(event.pitch, event.offset - event.onset, event.velocity, grid)
        start = int(round(event.onset * grid.sample_rate))
        end = min(start + len(note), n_samples)
        audio[start:end] += note[:end - start]

    name = f"toy-{index:04d}-{style.cell}"
    return ToyPiece(name=name, events=events, audio=audio, style=style, seed=seed, group=group)


def generate_corpus(seed, n_pieces, piece_length_s, grid, base_style=StyleSpec()):
    """One piece per style cell, round robin; fully determined by `seed`."""
    if n_pieces < len(STYLE_CELLS):
        raise ValueError(f"need at least {len(STYLE_CELLS)} pieces, got {n_pieces}")
    if piece_length_s <= 2 * RELEASE_S:
        raise ValueError(f"piece length {piece_length_s}s leaves no room for a note")
    pieces = [generate_piece(seed, i, piece_length_s, grid, base_style) for i in range(n_pieces)]
    logger.info(f"Generated {n_pieces} toy pieces of {piece_length_s}s (seed {seed})")
    return pieces


def split_for_group(group, holdout_every=4):
    """Every `holdout_every`-th melody group is held out for validation."""
    return "validation" if group % holdout_every == holdout_every - 1 else "train"
