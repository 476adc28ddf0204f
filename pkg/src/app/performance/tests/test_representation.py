import tempfile
from pathlib import Path

import librosa
import mido
import numpy as np
import pandas as pd
import soundfile as sf
from django.test import SimpleTestCase

from ..exceptions import AudioFormatError, ConfigError, CropError, MidiParseError, RasterizeError
from ..representation import (
    LOG_FLOOR_VALUE, N_KEYS, N_MELS, FrameGrid, NoteEvent, PieceArrays, crop_piece, label_articulation,
    label_dynamics, load_piece, load_split, mel_spectrogram, parse_midi, prepare_piece, rasterize,
    read_audio, read_manifest, save_piece, window_frames, write_pieces_manifest,
)
from .helpers import TEST_GRID, note_track, smf_bytes


class FrameGridTests(SimpleTestCase):
    def test_default_grid(self):
        grid = FrameGrid()
        self.assertEqual(grid.frames_per_second, 62.5)
        self.assertEqual(grid.n_mels, N_MELS)
        self.assertEqual(grid.mel_filterbank().shape, (N_MELS, 513))

    def test_frame_arithmetic(self):
        self.assertEqual(TEST_GRID.frames_per_second, 50)
        self.assertEqual(TEST_GRID.n_frames(1.0), 50)
        self.assertEqual(TEST_GRID.n_frames(1.01), 51)
        self.assertEqual(TEST_GRID.time_to_frame(0.1), 5)
        self.assertEqual(TEST_GRID.time_to_frame(0.0999), 4)

    def test_invalid_grids(self):
        with self.assertRaises(ConfigError):
            FrameGrid(hop_length=2048)
        with self.assertRaises(ConfigError):
            FrameGrid(n_mels=64)
        with self.assertRaises(ConfigError):
            FrameGrid(mel_fmax=9000)

    def test_dict_round_trip(self):
        self.assertEqual(FrameGrid.from_dict(TEST_GRID.to_dict()), TEST_GRID)


class ParseMidiTests(SimpleTestCase):
    def test_notes_in_seconds(self):
        data = smf_bytes(note_track([(60, 0, 480, 64), (64, 960, 1440, 90)]))
        events = parse_midi(data)
        self.assertEqual(
            [(e.pitch, e.onset, e.offset, e.velocity) for e in events],
            [(60, 0.0, 0.5, 64), (64, 1.0, 1.5, 90)],
        )

    def test_tempo_change(self):
        tempo_track = note_track([], tempos=[(0, 500000), (960, 250000)])
        data = smf_bytes(tempo_track, note_track([(60, 960, 1440, 80)]))
        (event,) = parse_midi(data)
        self.assertAlmostEqual(event.onset, 1.0)
        self.assertAlmostEqual(event.offset, 1.25)

    def test_overlapping_same_pitch_pairs_first_on_first_off(self):
        track = note_track([(60, 0, None, 50), (60, 240, None, 90)])
        track.append(mido.Message("note_off", note=60, velocity=0, time=240))
        track.append(mido.Message("note_off", note=60, velocity=0, time=240))
        events = parse_midi(smf_bytes(track))
        self.assertEqual([(e.onset, e.offset, e.velocity) for e in events],
                         [(0.0, 0.5, 50), (0.25, 0.75, 90)])

    def test_velocity_zero_note_on_releases(self):
        track = note_track([(62, 0, None, 70)])
        track.append(mido.Message("note_on", note=62, velocity=0, time=480))
        (event,) = parse_midi(smf_bytes(track))
        self.assertEqual((event.onset, event.offset), (0.0, 0.5))

    def test_unreleased_note_closed_at_track_end(self):
        data = smf_bytes(note_track([(60, 0, None, 80)], end_tick=960))
        with self.assertLogs("app.performance.representation", "WARNING"):
            (event,) = parse_midi(data)
        self.assertEqual(event.offset, 1.0)
        self.assertTrue(event.closed_at_track_end)

    def test_events_sorted_by_onset(self):
        data = smf_bytes(note_track([(70, 480, 960, 60)]), note_track([(50, 0, 960, 60)]))
        self.assertEqual([e.pitch for e in parse_midi(data)], [50, 70])

    def test_not_a_midi_file(self):
        with self.assertRaises(MidiParseError) as ctx:
            parse_midi(b"RIFF\x00\x00\x00\x00WAVEfmt ")
        self.assertEqual(ctx.exception.offset, 0)

    def test_truncated_track_reports_offset(self):
        data = smf_bytes(note_track([(60, 0, 480, 64)]))
        with self.assertRaises(MidiParseError) as ctx:
            parse_midi(data[:-3])
        self.assertEqual(ctx.exception.offset, 14)
        self.assertIn("byte offset 14", str(ctx.exception))

    def test_unsupported_type(self):
        data = bytearray(smf_bytes(note_track([(60, 0, 480, 64)])))
        data[8:10] = (2).to_bytes(2, "big")
        with self.assertRaises(MidiParseError):
            parse_midi(bytes(data))


class RasterizeTests(SimpleTestCase):
    def test_rolls(self):
        event = NoteEvent(60, 0.1, 0.3, 80)
        onset, frame = rasterize([event], TEST_GRID, 1.0)
        self.assertEqual(onset.shape, (50, N_KEYS))
        self.assertEqual(onset.sum(), 1)
        self.assertEqual(onset[5, event.key], 1)
        np.testing.assert_array_equal(np.flatnonzero(frame[:, event.key]), np.arange(5, 15))

    def test_short_note_covers_its_onset_frame(self):
        onset, frame = rasterize([NoteEvent(21, 0.1, 0.105, 80)], TEST_GRID, 1.0)
        self.assertEqual(frame.sum(), 1)
        self.assertEqual(frame[5, 0], 1)

    def test_offset_after_duration_is_clipped(self):
        _, frame = rasterize([NoteEvent(108, 0.9, 1.5, 80)], TEST_GRID, 1.0)
        self.assertEqual(frame[:, N_KEYS - 1].sum(), 5)

    def test_onsets_lie_inside_the_frame_roll(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            events = []
            for _ in range(rng.integers(1, 12)):
                onset = float(rng.uniform(0.0, 1.9))
                events.append(NoteEvent(int(rng.integers(21, 109)), onset,
                                        onset + float(rng.uniform(0.001, 0.6)), 64))
            onset_roll, frame_roll = rasterize(events, TEST_GRID, 2.0)
            self.assertTrue(np.all(onset_roll <= frame_roll))

    def test_out_of_range_pitch(self):
        with self.assertRaises(RasterizeError) as ctx:
            rasterize([NoteEvent(20, 0.0, 0.5, 80)], TEST_GRID, 1.0)
        self.assertEqual(ctx.exception.events[0].pitch, 20)

    def test_onset_after_duration(self):
        with self.assertRaises(RasterizeError):
            rasterize([NoteEvent(60, 1.0, 1.2, 80)], TEST_GRID, 1.0)

    def test_invalid_note(self):
        with self.assertRaises(ValueError):
            NoteEvent(60, 0.5, 0.5, 80)
        with self.assertRaises(ValueError):
            NoteEvent(60, 0.0, 0.5, 0)


def brute_force_labels(notes, n_frames):
    """notes: (start_frame, end_frame, velocity) with end exclusive."""
    c_art = np.zeros(n_frames, dtype=np.uint8)
    c_dyn = np.zeros(n_frames, dtype=np.uint8)
    for t in range(n_frames):
        velocities = [v for start, end, v in notes if start <= t < end]
        if velocities:
            c_art[t] = 1
            c_dyn[t] = int(sum(velocities) / len(velocities) > 70)
    return c_art, c_dyn


class LabelTests(SimpleTestCase):
    def test_labels_match_interval_scan(self):
        rng = np.random.default_rng(1234)
        fps = TEST_GRID.frames_per_second
        n_frames = 60
        for _ in range(100):
            notes, events = [], []
            for _ in range(rng.integers(0, 8)):
                start = int(rng.integers(0, n_frames - 1))
                length = int(rng.integers(1, 20))
                velocity = int(rng.choice([69, 70, 71, int(rng.integers(1, 128))]))
                # a few milliseconds into the frame so flooring is unambiguous
                onset = start / fps + 0.004
                offset = (start + length) / fps + 0.004
                events.append(NoteEvent(60 + len(events), onset, offset, velocity))
                notes.append((start, min(start + length, n_frames), velocity))

            duration = n_frames / fps
            _, frame = rasterize(events, TEST_GRID, duration)
            expected_art, expected_dyn = brute_force_labels(notes, n_frames)
            np.testing.assert_array_equal(label_articulation(frame), expected_art)
            np.testing.assert_array_equal(label_dynamics(events, TEST_GRID, n_frames), expected_dyn)

    def test_dynamics_ignore_event_order(self):
        rng = np.random.default_rng(5)
        events = [
            NoteEvent(int(rng.integers(40, 80)), float(start), float(start) + 0.3,
                      int(rng.integers(1, 128)))
            for start in rng.uniform(0.0, 1.5, 12)
        ]
        expected = label_dynamics(events, TEST_GRID, 100)
        for _ in range(5):
            shuffled = [events[i] for i in rng.permutation(len(events))]
            np.testing.assert_array_equal(label_dynamics(shuffled, TEST_GRID, 100), expected)

    def test_dynamics_threshold_is_strict(self):
        def dyn(*velocities):
            events = [NoteEvent(60 + i, 0.0, 0.1, v) for i, v in enumerate(velocities)]
            return int(label_dynamics(events, TEST_GRID, 5)[0])

        self.assertEqual(dyn(70), 0)
        self.assertEqual(dyn(71), 1)
        self.assertEqual(dyn(70, 70), 0)
        self.assertEqual(dyn(70, 71), 1)
        self.assertEqual(dyn(69, 71), 0)

    def test_silence_is_soft(self):
        events = [NoteEvent(60, 0.0, 0.1, 120)]
        c_dyn = label_dynamics(events, TEST_GRID, 20)
        self.assertEqual(c_dyn[:5].tolist(), [1] * 5)
        self.assertFalse(c_dyn[5:].any())


class MelSpectrogramTests(SimpleTestCase):
    grid = FrameGrid()

    def test_sine_peaks_at_its_band(self):
        t = np.arange(self.grid.sample_rate) / self.grid.sample_rate
        audio = 0.5 * np.sin(2 * np.pi * 440.0 * t)
        mel = mel_spectrogram(audio, self.grid)
        centres = librosa.mel_frequencies(
            n_mels=N_MELS + 2, fmin=self.grid.mel_fmin, fmax=self.grid.mel_fmax)[1:-1]
        expected = int(np.argmin(np.abs(centres - 440.0)))
        self.assertLessEqual(abs(int(np.argmax(mel.mean(0))) - expected), 1)

    def test_sine_at_a_band_centre_peaks_there_in_every_frame(self):
        band = 40
        centres = librosa.mel_frequencies(
            n_mels=N_MELS + 2, fmin=self.grid.mel_fmin, fmax=self.grid.mel_fmax)
        t = np.arange(self.grid.sample_rate) / self.grid.sample_rate
        mel = mel_spectrogram(0.5 * np.sin(2 * np.pi * centres[band + 1] * t), self.grid)
        np.testing.assert_array_equal(mel[1:-1].argmax(-1), band)

    def test_repeatable_bit_for_bit(self):
        audio = np.random.default_rng(8).normal(0, 0.1, 12000).astype(np.float32)
        first = mel_spectrogram(audio, TEST_GRID, n_frames=40)
        second = mel_spectrogram(audio.copy(), TEST_GRID, n_frames=40)
        self.assertEqual(first.tobytes(), second.tobytes())

    def test_silence_sits_on_the_floor(self):
        mel = mel_spectrogram(np.zeros(8000), self.grid)
        self.assertTrue(np.all(mel == LOG_FLOOR_VALUE))

    def test_aligned_frame_count(self):
        mel = mel_spectrogram(np.ones(16000) * 0.1, TEST_GRID, n_frames=50)
        self.assertEqual(mel.shape, (50, N_MELS))
        self.assertEqual(mel.dtype, np.float32)
        self.assertTrue(np.all(mel >= LOG_FLOOR_VALUE))

    def test_rejects_bad_audio(self):
        with self.assertRaises(AudioFormatError):
            mel_spectrogram(np.zeros(1000), self.grid, sample_rate=44100)
        with self.assertRaises(AudioFormatError):
            mel_spectrogram(np.zeros((1000, 2)), self.grid)
        with self.assertRaises(AudioFormatError):
            mel_spectrogram(np.zeros(0), self.grid)


def toy_piece_arrays(n_frames=100):
    rng = np.random.default_rng(0)
    frame = np.zeros((n_frames, N_KEYS), dtype=np.uint8)
    frame[10:40, 39] = 1
    onset = np.zeros_like(frame)
    onset[10, 39] = 1
    return PieceArrays(
        mel=rng.normal(-5, 1, (n_frames, N_MELS)),
        onset=onset,
        frame=frame,
        c_art=label_articulation(frame),
        c_dyn=np.zeros(n_frames),
        name="toy",
    )


class CropTests(SimpleTestCase):
    def test_crop_is_aligned(self):
        piece = toy_piece_arrays()
        crop = crop_piece(piece, 5, 0.4, TEST_GRID)
        self.assertEqual(window_frames(0.4, TEST_GRID), 20)
        self.assertEqual(crop.n_frames, 20)
        np.testing.assert_array_equal(crop.mel, piece.mel[5:25])
        np.testing.assert_array_equal(crop.c_art, piece.c_art[5:25])
        self.assertEqual(crop.onset[5, 39], 1)

    def test_crop_commutes_with_labelling(self):
        rng = np.random.default_rng(21)
        fps = TEST_GRID.frames_per_second
        events = []
        for _ in range(15):
            start = int(rng.integers(0, 95))
            events.append(NoteEvent(int(rng.integers(40, 80)), start / fps + 0.004,
                                    (start + int(rng.integers(1, 30))) / fps + 0.004,
                                    int(rng.integers(1, 128))))
        _, frame = rasterize(events, TEST_GRID, 2.0)
        piece = PieceArrays(
            mel=np.zeros((100, N_MELS)), onset=np.zeros_like(frame), frame=frame,
            c_art=label_articulation(frame), c_dyn=label_dynamics(events, TEST_GRID, 100),
        )
        for first in (0, 13, 60, 80):
            crop = crop_piece(piece, first, 0.4, TEST_GRID)
            lag = first / fps
            shifted = [
                NoteEvent(e.pitch, max(e.onset - lag, 0.0), e.offset - lag, e.velocity)
                for e in events if e.offset - lag > 0.01 and e.onset - lag < 0.4
            ]
            np.testing.assert_array_equal(label_articulation(crop.frame), crop.c_art)
            np.testing.assert_array_equal(label_dynamics(shifted, TEST_GRID, 20), crop.c_dyn)

    def test_piece_shorter_than_window(self):
        with self.assertRaisesMessage(CropError, "pad the piece or skip it"):
            crop_piece(toy_piece_arrays(10), 0, 0.4, TEST_GRID)

    def test_window_past_the_end(self):
        with self.assertRaises(CropError):
            crop_piece(toy_piece_arrays(), 90, 0.4, TEST_GRID)

    def test_arrays_must_agree(self):
        piece = toy_piece_arrays()
        with self.assertRaises(ValueError):
            PieceArrays(piece.mel, piece.onset[:-1], piece.frame, piece.c_art, piece.c_dyn)


class FilesTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_archive_keeps_arrays_and_grid(self):
        piece = toy_piece_arrays()
        path = save_piece(piece, self.root / "toy.npz", TEST_GRID)
        loaded, grid = load_piece(path)
        self.assertEqual(grid, TEST_GRID)
        for key in ("mel", "onset", "frame", "c_art", "c_dyn"):
            np.testing.assert_array_equal(getattr(loaded, key), getattr(piece, key))

    def test_load_split(self):
        piece = toy_piece_arrays()
        save_piece(piece, self.root / "a.npz", TEST_GRID)
        save_piece(piece, self.root / "b.npz", TEST_GRID)
        rows = [
            {**piece.summary(), "name": "a", "archive": "a.npz", "split": "train"},
            {**piece.summary(), "name": "b", "archive": "b.npz", "split": "validation"},
        ]
        write_pieces_manifest(rows, self.root)
        pieces, grid = load_split(self.root, "train")
        self.assertEqual([p.name for p in pieces], ["a"])
        self.assertEqual(grid, TEST_GRID)
        with self.assertRaises(ConfigError):
            load_split(self.root, "test")

    def test_maestro_manifest(self):
        pd.DataFrame({
            "canonical_title": ["Etude"],
            "split": ["train"],
            "midi_filename": ["2004/a.midi"],
            "audio_filename": ["2004/a.wav"],
        }).to_csv(self.root / "maestro.csv", index=False)
        table = read_manifest(self.root / "maestro.csv")
        self.assertEqual(list(table.columns), ["midi_path", "audio_path", "split"])
        self.assertEqual(table["midi_path"][0], str(self.root / "2004/a.midi"))

    def test_bad_manifests(self):
        pd.DataFrame({"midi_path": [], "audio_path": [], "split": []}).to_csv(
            self.root / "empty.csv", index=False)
        with self.assertRaises(ConfigError):
            read_manifest(self.root / "empty.csv")
        pd.DataFrame({"midi_path": ["a.mid"], "audio_path": ["a.wav"]}).to_csv(
            self.root / "nosplit.csv", index=False)
        with self.assertRaises(ConfigError):
            read_manifest(self.root / "nosplit.csv")

    def test_read_audio_checks_rate(self):
        sf.write(self.root / "a.wav", np.zeros((800, 2)), 8000)
        with self.assertRaises(AudioFormatError):
            read_audio(self.root / "a.wav", TEST_GRID)
        sf.write(self.root / "b.wav", np.full((1600, 2), 0.25), 16000)
        audio = read_audio(self.root / "b.wav", TEST_GRID)
        self.assertEqual(audio.shape, (1600,))
        self.assertAlmostEqual(float(audio[0]), 0.25, places=3)

    def test_prepare_piece(self):
        (self.root / "take.mid").write_bytes(smf_bytes(note_track([(60, 0, 480, 100)])))
        t = np.arange(16000) / 16000
        sf.write(self.root / "take.wav", 0.3 * np.sin(2 * np.pi * 261.6 * t), 16000)

        piece, events = prepare_piece(self.root / "take.mid", self.root / "take.wav", TEST_GRID)
        self.assertEqual(piece.name, "take")
        self.assertEqual(len(events), 1)
        self.assertEqual(piece.n_frames, 50)
        self.assertEqual(piece.c_art.tolist(), [1] * 25 + [0] * 25)
        self.assertEqual(piece.c_dyn.tolist(), [1] * 25 + [0] * 25)
