import io
import os
from unittest import skipUnless

import mido

from ..representation import FrameGrid
from ..synthdata import generate_piece
from ..trainer import TrainConfig

# 50 frames per second keeps frame arithmetic readable
TEST_GRID = FrameGrid(hop_length=320)

slow = skipUnless(
    os.getenv("PIANO_SYNTH_SLOW_TESTS") == "1",
    "acceptance run; set PIANO_SYNTH_SLOW_TESTS=1",
)


def note_track(notes, tempos=(), end_tick=None):
    """notes: (pitch, on_tick, off_tick or None, velocity); tempos: (tick, microseconds per beat)."""
    timed = []
    for tick, tempo in tempos:
        timed.append((tick, 0, mido.MetaMessage("set_tempo", tempo=tempo)))
    for pitch, on, off, velocity in notes:
        timed.append((on, 2, mido.Message("note_on", note=pitch, velocity=velocity)))
        if off is not None:
            timed.append((off, 1, mido.Message("note_off", note=pitch, velocity=0)))
    timed.sort(key=lambda item: (item[0], item[1]))

    track = mido.MidiTrack()
    now = 0
    for tick, _, message in timed:
        track.append(message.copy(time=tick - now))
        now = tick
    if end_tick is not None:
        track.append(mido.MetaMessage("end_of_track", time=end_tick - now))
    return track


def smf_bytes(*tracks, ticks_per_beat=480, smf_type=1):
    midi = mido.MidiFile(type=smf_type, ticks_per_beat=ticks_per_beat)
    midi.tracks.extend(tracks)
    buffer = io.BytesIO()
    midi.save(file=buffer)
    return buffer.getvalue()


def tiny_config(**overrides):
    values = dict(
        batch_size=4, max_steps=10, crop_seconds=2.0, latent_dim=4, hidden_size=16,
        num_layers=1, eval_every=5, checkpoint_every=5, log_every=5,
    )
    values.update(overrides)
    return TrainConfig(**values)


def toy_pieces(n=8, seconds=3.0, seed=0, grid=TEST_GRID):
    return [generate_piece(seed, i, seconds, grid).to_arrays(grid) for i in range(n)]
