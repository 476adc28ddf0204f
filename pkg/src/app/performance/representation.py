"""
Data representation: MIDI ingestion, piano rolls, condition labels, the
log-Mel front end and aligned cropping.

Everything in here is a pure function of its inputs. Rolls, labels and
spectrograms are plain numpy arrays; `PieceArrays` bundles the five arrays of
one piece and checks that they agree frame by frame.
"""

import bisect
import io
import json
import logging
import math
import os
import struct
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import librosa
import mido
import numpy as np
import pandas as pd
import soundfile as sf

from .exceptions import AudioFormatError, ConfigError, CropError, MidiParseError, RasterizeError

logger = logging.getLogger(__name__)

PIANO_LOW = 21
PIANO_HIGH = 108
N_KEYS = PIANO_HIGH - PIANO_LOW + 1
N_MELS = 80

LOG_FLOOR = 1e-5
LOG_FLOOR_VALUE = np.float32(np.log(LOG_FLOOR))

# c_dyn = 1 iff the mean velocity of the sounding notes is strictly above this
DYNAMICS_THRESHOLD = 70

# Absorbs float error in seconds * fps before flooring (0.29 * 50 etc.)
_FRAME_EPSILON = 1e-9

ARCHIVE_KEYS = ("mel", "onset", "frame", "c_art", "c_dyn")


@dataclass(frozen=True)
class FrameGrid:
    sample_rate: int = 16000
    hop_length: int = 256
    window_length: int = 1024
    n_mels: int = N_MELS
    mel_fmin: float = 30.0
    mel_fmax: float = 8000.0

    def __post_init__(self):
        if self.n_mels != N_MELS:
            raise ConfigError(f"n_mels must be {N_MELS}, got {self.n_mels}")
        if self.sample_rate <= 0 or self.hop_length <= 0:
            raise ConfigError("sample_rate and hop_length must be positive")
        if self.hop_length > self.window_length:
            raise ConfigError(
                f"hop_length ({self.hop_length}) exceeds window_length ({self.window_length})")
        if not 0 <= self.mel_fmin < self.mel_fmax <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 <= mel_fmin < mel_fmax <= {self.sample_rate / 2}, "
                f"got {self.mel_fmin}..{self.mel_fmax}")

    @property
    def frames_per_second(self):
        return self.sample_rate / self.hop_length

    def n_frames(self, duration_s):
        return math.ceil(duration_s * self.frames_per_second - _FRAME_EPSILON)

    def time_to_frame(self, seconds):
        return math.floor(seconds * self.frames_per_second + _FRAME_EPSILON)

    def mel_filterbank(self):
        """(n_mels, window_length // 2 + 1) triangular filters."""
        return librosa.filters.mel(
            sr=self.sample_rate,
            n_fft=self.window_length,
            n_mels=self.n_mels,
            fmin=self.mel_fmin,
            fmax=self.mel_fmax,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    offset: float
    velocity: int
    # Set when the note-off never arrived and the note was closed at track end
    closed_at_track_end: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"MIDI pitch out of range: {self.pitch}")
        if self.onset < 0:
            raise ValueError(f"negative onset: {self.onset}")
        if self.offset <= self.onset:
            raise ValueError(f"offset {self.offset} must follow onset {self.onset}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")

    @property
    def in_piano_range(self):
        return PIANO_LOW <= self.pitch <= PIANO_HIGH

    @property
    def key(self):
        return self.pitch - PIANO_LOW


@dataclass(frozen=True)
class ConditionSequence:
    c_art: np.ndarray
    c_dyn: np.ndarray

    def __post_init__(self):
        if self.c_art.shape != self.c_dyn.shape or self.c_art.ndim != 1:
            raise ValueError(
                f"condition shapes differ: {self.c_art.shape} vs {self.c_dyn.shape}")
        for name in ("c_art", "c_dyn"):
            if not _is_binary(getattr(self, name)):
                raise ValueError(f"{name} must be binary")

    def __len__(self):
        return len(self.c_art)


@dataclass
class PieceArrays:
    """The five frame-aligned arrays of one piece (X, Y_onset, frame roll, c_art, c_dyn)."""

    mel: np.ndarray
    onset: np.ndarray
    frame: np.ndarray
    c_art: np.ndarray
    c_dyn: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.mel = np.asarray(self.mel, dtype=np.float32)
        self.onset = np.asarray(self.onset, dtype=np.uint8)
        self.frame = np.asarray(self.frame, dtype=np.uint8)
        self.c_art = np.asarray(self.c_art, dtype=np.uint8)
        self.c_dyn = np.asarray(self.c_dyn, dtype=np.uint8)

        T = self.mel.shape[0]
        expected = {
            "mel": (T, N_MELS),
            "onset": (T, N_KEYS),
            "frame": (T, N_KEYS),
            "c_art": (T,),
            "c_dyn": (T,),
        }
        for key, shape in expected.items():
            if getattr(self, key).shape != shape:
                raise ValueError(
                    f"{self.name or 'piece'}: '{key}' has shape {getattr(self, key).shape}, "
                    f"expected {shape}")
        if not np.isfinite(self.mel).all():
            raise ValueError(f"{self.name or 'piece'}: mel contains non-finite values")

    @property
    def n_frames(self):
        return self.mel.shape[0]

    @property
    def conditions(self):
        return ConditionSequence(self.c_art, self.c_dyn)

    def slice(self, start, stop):
        return PieceArrays(
            mel=self.mel[start:stop],
            onset=self.onset[start:stop],
            frame=self.frame[start:stop],
            c_art=self.c_art[start:stop],
            c_dyn=self.c_dyn[start:stop],
            name=self.name,
        )

    def summary(self):
        return {
            "name": self.name,
            "n_frames": self.n_frames,
            "n_notes": int(self.onset.sum()),
            "art_fraction": float(self.c_art.mean()) if self.n_frames else 0.0,
            "dyn_fraction": float(self.c_dyn.mean()) if self.n_frames else 0.0,
        }


def _is_binary(array):
    return bool(np.isin(array, (0, 1)).all())


# ---------------------------------------------------------------------------
# MIDI ingestion
# ---------------------------------------------------------------------------

def _scan_chunks(data):
    """Validate the SMF chunk layout; returns (format, division, [(offset, chunk_bytes)])."""
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header chunk", offset=0)
    header_length = int.from_bytes(data[4:8], "big")
    if header_length < 6 or 8 + header_length > len(data):
        raise MidiParseError("truncated header chunk", offset=4)
    smf_format, n_tracks, division = struct.unpack(">HHh", data[8:14])
    if smf_format not in (0, 1):
        raise MidiParseError(f"unsupported SMF type {smf_format}", offset=8)
    if division <= 0:
        raise MidiParseError("SMPTE time division is not supported", offset=12)

    tracks = []
    pos = 8 + header_length
    while len(tracks) < n_tracks:
        if pos + 8 > len(data):
            raise MidiParseError(
                f"expected {n_tracks} track chunks, found {len(tracks)}", offset=pos)
        tag = data[pos:pos + 4]
        length = int.from_bytes(data[pos + 4:pos + 8], "big")
        if pos + 8 + length > len(data):
            raise MidiParseError(f"truncated {tag!r} chunk", offset=pos)
        if tag == b"MTrk":
            tracks.append((pos, data[pos:pos + 8 + length]))
        else:
            logger.debug(f"Skipping unknown chunk {tag!r} at offset {pos}")
        pos += 8 + length
    return smf_format, division, tracks


def _read_track(chunk_offset, chunk, division):
    # mido parses a one-track file so that errors can be pinned to this chunk
    single = b"MThd" + (6).to_bytes(4, "big") + struct.pack(">HHh", 0, 1, division) + chunk
    try:
        return mido.MidiFile(file=io.BytesIO(single)).tracks[0]
    except (OSError, EOFError, ValueError, KeyError, IndexError) as e:
        raise MidiParseError(f"malformed track chunk: {e}", offset=chunk_offset) from e


class _TempoMap:
    def __init__(self, tempo_events, ticks_per_beat):
        self.ticks_per_beat = ticks_per_beat
        # (start_tick, start_seconds, tempo)
        self.segments = [(0, 0.0, 500000)]
        for tick, tempo in sorted(tempo_events):
            start_tick, start_sec, current = self.segments[-1]
            if tick == start_tick:
                self.segments[-1] = (start_tick, start_sec, tempo)
                continue
            seconds = start_sec + mido.tick2second(tick - start_tick, ticks_per_beat, current)
            self.segments.append((tick, seconds, tempo))
        self._starts = [s[0] for s in self.segments]

    def seconds(self, tick):
        index = bisect.bisect_right(self._starts, tick) - 1
        start_tick, start_sec, tempo = self.segments[index]
        return start_sec + mido.tick2second(tick - start_tick, self.ticks_per_beat, tempo)


def parse_midi(file_bytes):
    """
    Parse a type 0/1 Standard MIDI File into NoteEvents sorted by onset.

    Note-on/note-off pairs are matched first-on/first-off per (channel, pitch).
    Sustain pedal and all other controllers are ignored. Notes still open at
    the end of their track are closed there and flagged.
    """
    data = bytes(file_bytes)
    _, division, chunks = _scan_chunks(data)
    tracks = [_read_track(offset, chunk, division) for offset, chunk in chunks]

    tempo_events = []
    for track in tracks:
        tick = 0
        for msg in track:
            tick += msg.time
            if msg.type == "set_tempo":
                tempo_events.append((tick, msg.tempo))
    tempo_map = _TempoMap(tempo_events, division)

    events = []
    for track_index, track in enumerate(tracks):
        open_notes = defaultdict(deque)
        tick = 0
        for msg in track:
            tick += msg.time
            if msg.type == "note_on" and msg.velocity > 0:
                open_notes[(msg.channel, msg.note)].append((tick, msg.velocity))
            elif msg.type in ("note_off", "note_on"):
                pending = open_notes.get((msg.channel, msg.note))
                if not pending:
                    logger.debug(f"Track {track_index}: note-off without note-on, pitch {msg.note}")
                    continue
                start_tick, velocity = pending.popleft()
                _append_note(events, msg.note, tempo_map, start_tick, tick, velocity)

        for (channel, pitch), pending in open_notes.items():
            for start_tick, velocity in pending:
                logger.warning(
                    f"Track {track_index}: note {pitch} (channel {channel}) never released, "
                    f"closing at track end")
                _append_note(events, pitch, tempo_map, start_tick, tick, velocity, closed=True)

    events.sort(key=lambda e: (e.onset, e.pitch, e.offset))
    return events


def _append_note(events, pitch, tempo_map, start_tick, end_tick, velocity, closed=False):
    onset = tempo_map.seconds(start_tick)
    offset = tempo_map.seconds(end_tick)
    if offset <= onset:
        logger.debug(f"Dropping zero-length note {pitch} at {onset:.3f}s")
        return
    events.append(NoteEvent(pitch, onset, offset, velocity, closed_at_track_end=closed))


# ---------------------------------------------------------------------------
# Rolls and labels
# ---------------------------------------------------------------------------

def note_span(event, grid, n_frames=None):
    """Half-open frame range [start, end) during which `event` sounds."""
    start = grid.time_to_frame(event.onset)
    end = max(start + 1, grid.time_to_frame(event.offset))
    if n_frames is not None:
        start = min(start, n_frames - 1)
        end = min(end, n_frames)
    return start, end


def rasterize(events, grid, duration_s):
    """Return (onset_roll, frame_roll), both uint8 arrays of shape (T, 88)."""
    n_frames = grid.n_frames(duration_s)

    outside = [e for e in events if not e.in_piano_range]
    if outside:
        raise RasterizeError(f"pitch outside [{PIANO_LOW}, {PIANO_HIGH}]: {outside}", outside)
    late = [e for e in events if e.onset >= duration_s]
    if late:
        raise RasterizeError(f"onset at or after duration {duration_s}s: {late}", late)

    onset_roll = np.zeros((n_frames, N_KEYS), dtype=np.uint8)
    frame_roll = np.zeros((n_frames, N_KEYS), dtype=np.uint8)
    for event in events:
        start, end = note_span(event, grid, n_frames)
        onset_roll[start, event.key] = 1
        frame_roll[start:end, event.key] = 1
    return onset_roll, frame_roll


def label_articulation(frame_roll):
    """c_art_t = 1 iff any note is held at frame t (onset frame included)."""
    return np.asarray(frame_roll).any(axis=1).astype(np.uint8)


def label_dynamics(events, grid, n_frames):
    """c_dyn_t = 1 iff notes sound at t and their mean velocity exceeds 70."""
    velocity_sum = np.zeros(n_frames, dtype=np.int64)
    active = np.zeros(n_frames, dtype=np.int64)
    for event in events:
        start, end = note_span(event, grid, n_frames)
        velocity_sum[start:end] += event.velocity
        active[start:end] += 1
    # integer form of mean > threshold
    loud = (active > 0) & (velocity_sum > DYNAMICS_THRESHOLD * active)
    return loud.astype(np.uint8)


# ---------------------------------------------------------------------------
# Audio front end
# ---------------------------------------------------------------------------

def mel_spectrogram(audio_samples, grid, n_frames=None, sample_rate=None):
    """
    Log-Mel spectrogram, shape (T, 80), float32.

    Without `n_frames` the analysis is uncentred: T = 1 + (len - window) // hop.
    With `n_frames` the signal is centre-padded so that Mel frame t is centred
    on roll frame t, then padded or trimmed at the end to exactly n_frames.
    """
    if sample_rate is not None and sample_rate != grid.sample_rate:
        raise AudioFormatError(
            f"audio is at {sample_rate} Hz but the grid expects {grid.sample_rate} Hz; "
            f"resample it externally")
    audio = np.asarray(audio_samples, dtype=np.float32)
    if audio.ndim != 1:
        raise AudioFormatError(f"expected mono audio, got shape {audio.shape}")
    if audio.size == 0:
        raise AudioFormatError("empty audio")

    window, hop = grid.window_length, grid.hop_length
    if n_frames is None:
        padded = audio if audio.size >= window else np.pad(audio, (0, window - audio.size))
    else:
        needed = window + (n_frames - 1) * hop
        padded = np.pad(audio, ((window - hop) // 2, 0))
        if padded.size < needed:
            padded = np.pad(padded, (0, needed - padded.size))
        padded = padded[:needed]

    magnitude = np.abs(librosa.stft(
        padded, n_fft=window, hop_length=hop, win_length=window, window="hann", center=False))
    mel = grid.mel_filterbank() @ magnitude
    return np.log(np.maximum(mel, LOG_FLOOR)).T.astype(np.float32)


def read_audio(path, grid):
    """Read a PCM/float WAV file as mono float32 at the grid rate."""
    try:
        samples, sample_rate = sf.read(str(path), dtype="float32", always_2d=True)
    except RuntimeError as e:
        raise AudioFormatError(f"cannot read {path}: {e}") from e
    if sample_rate != grid.sample_rate:
        raise AudioFormatError(
            f"{path} is at {sample_rate} Hz but the grid expects {grid.sample_rate} Hz; "
            f"resample it externally")
    return samples.mean(axis=1)


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------

def window_frames(window_s, grid):
    return round(window_s * grid.frames_per_second)


def crop_pair(X, onset_roll, frame_roll, conditions, start_frame, window_s, grid):
    """Aligned crop of the spectrogram, both rolls and both condition sequences."""
    piece = PieceArrays(X, onset_roll, frame_roll, conditions.c_art, conditions.c_dyn)
    return crop_piece(piece, start_frame, window_s, grid)


def crop_piece(piece, start_frame, window_s, grid):
    length = window_frames(window_s, grid)
    if piece.n_frames < length:
        raise CropError(
            f"{piece.name or 'piece'} has {piece.n_frames} frames, shorter than the "
            f"{length}-frame window; pad the piece or skip it")
    if start_frame < 0 or start_frame + length > piece.n_frames:
        raise CropError(
            f"crop [{start_frame}, {start_frame + length}) exceeds {piece.n_frames} frames")
    return piece.slice(start_frame, start_frame + length)


# ---------------------------------------------------------------------------
# Piece assembly and archives
# ---------------------------------------------------------------------------

def arrays_from_performance(events, audio, grid, name=""):
    """Rasterize, label and analyse one aligned (notes, audio) pair."""
    duration = len(audio) / grid.sample_rate
    n_frames = grid.n_frames(duration)

    kept = [e for e in events if e.in_piano_range and e.onset < duration]
    if len(kept) != len(events):
        logger.warning(
            f"{name}: dropped {len(events) - len(kept)} notes outside the piano range "
            f"or after the audio ends")

    onset_roll, frame_roll = rasterize(kept, grid, duration)
    return PieceArrays(
        mel=mel_spectrogram(audio, grid, n_frames=n_frames),
        onset=onset_roll,
        frame=frame_roll,
        c_art=label_articulation(frame_roll),
        c_dyn=label_dynamics(kept, grid, n_frames),
        name=name,
    )


def prepare_piece(midi_path, audio_path, grid, name=None):
    name = name or Path(midi_path).stem
    events = parse_midi(Path(midi_path).read_bytes())
    audio = read_audio(audio_path, grid)
    logger.debug(f"{name}: {len(events)} notes, {len(audio) / grid.sample_rate:.1f}s audio")
    return arrays_from_performance(events, audio, grid, name=name), events


def grid_sidecar_path(archive_path):
    archive_path = Path(archive_path)
    return archive_path.with_name(archive_path.stem + ".grid.json")


def save_piece(piece, path, grid):
    """Write `<name>.npz` plus a `<name>.grid.json` sidecar, each atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **{key: getattr(piece, key) for key in ARCHIVE_KEYS})
    os.replace(tmp, path)

    sidecar = grid_sidecar_path(path)
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    tmp.write_text(json.dumps(grid.to_dict(), indent=2, sort_keys=True))
    os.replace(tmp, sidecar)
    return path


def load_piece(path):
    """Return (PieceArrays, FrameGrid or None) for an archive written by save_piece."""
    path = Path(path)
    with np.load(path, allow_pickle=False) as archive:
        missing = [key for key in ARCHIVE_KEYS if key not in archive.files]
        if missing:
            raise ValueError(f"{path}: archive lacks {missing}")
        piece = PieceArrays(**{key: archive[key] for key in ARCHIVE_KEYS}, name=path.stem)

    sidecar = grid_sidecar_path(path)
    grid = FrameGrid.from_dict(json.loads(sidecar.read_text())) if sidecar.exists() else None
    return piece, grid


_MANIFEST_COLUMNS = (
    {"midi_filename": "midi_path", "audio_filename": "audio_path"},
    {"midi_path": "midi_path", "audio_path": "audio_path"},
)


def read_manifest(csv_path):
    """
    Read a MAESTRO-style manifest into a DataFrame with columns
    midi_path, audio_path, split (paths resolved against the CSV's directory).
    """
    csv_path = Path(csv_path)
    table = pd.read_csv(csv_path)
    for mapping in _MANIFEST_COLUMNS:
        if set(mapping) <= set(table.columns):
            table = table.rename(columns=mapping)
            break
    else:
        raise ConfigError(
            f"{csv_path}: expected columns midi_filename/audio_filename or midi_path/audio_path")
    if "split" not in table.columns:
        raise ConfigError(f"{csv_path}: missing 'split' column")
    if table.empty:
        raise ConfigError(f"{csv_path}: manifest lists no pieces")

    root = csv_path.parent
    table["midi_path"] = [str(root / p) for p in table["midi_path"]]
    table["audio_path"] = [str(root / p) for p in table["audio_path"]]
    return table[["midi_path", "audio_path", "split"]]


PIECES_MANIFEST = "pieces.csv"
PIECES_COLUMNS = [
    "name", "archive", "split", "n_frames", "n_notes", "art_fraction", "dyn_fraction",
    "articulation", "dynamics",
]


def write_pieces_manifest(rows, data_dir):
    """Write the data directory index (one row per archive) atomically."""
    data_dir = Path(data_dir)
    table = pd.DataFrame(rows, columns=PIECES_COLUMNS).fillna("")
    path = data_dir / PIECES_MANIFEST
    tmp = path.with_name(path.name + ".tmp")
    table.to_csv(tmp, index=False)
    os.replace(tmp, path)
    return path


def read_pieces_manifest(data_dir, split=None):
    data_dir = Path(data_dir)
    path = data_dir / PIECES_MANIFEST
    if not path.exists():
        raise ConfigError(f"{data_dir} has no {PIECES_MANIFEST}; run 'prepare' first")
    table = pd.read_csv(path, keep_default_na=False)
    if split is not None:
        table = table[table["split"] == split]
    return table.reset_index(drop=True)


def load_split(data_dir, split):
    """Load every archive of one split; returns (pieces, grid)."""
    table = read_pieces_manifest(data_dir, split)
    if table.empty:
        raise ConfigError(f"split '{split}' in {data_dir} is empty")
    pieces, grid = [], None
    for archive in table["archive"]:
        piece, piece_grid = load_piece(Path(data_dir) / archive)
        if grid is None:
            grid = piece_grid
        elif piece_grid is not None and piece_grid != grid:
            raise ConfigError(f"{archive} was prepared on a different grid")
        pieces.append(piece)
    return pieces, grid
