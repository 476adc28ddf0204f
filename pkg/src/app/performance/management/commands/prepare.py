import logging

from django.core.management.base import CommandError

from ...exceptions import PianoSynthError
from ...management.base import PipelineCommand
from ...models import Piece
from ...representation import (
    prepare_piece, read_manifest, save_piece, write_pieces_manifest,
)
from ...runs import config_section, defaults, resolve_config, resolve_grid
from ...synthdata import STYLE_CELLS, generate_corpus, split_for_group

logger = logging.getLogger(__name__)


class Command(PipelineCommand):
    help = "Turn a MIDI/audio manifest or a synthetic corpus into per-piece archives"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument("--manifest", help="CSV with midi/audio paths and a split column")
        source.add_argument("--synthetic", type=int, metavar="N", help="generate N toy pieces")
        parser.add_argument("--out", default="data", help="output data directory")
        parser.add_argument("--piece-seconds", type=float, help="length of synthetic pieces")
        parser.add_argument("--sample-rate", type=int)
        parser.add_argument("--hop-length", type=int)
        parser.add_argument("--window-length", type=int)
        parser.add_argument("--mel-fmin", type=float)
        parser.add_argument("--mel-fmax", type=float)

    def run(self, **options):
        grid = resolve_grid(self.config_file, {
            "sample_rate": options["sample_rate"],
            "hop_length": options["hop_length"],
            "window_length": options["window_length"],
            "mel_fmin": options["mel_fmin"],
            "mel_fmax": options["mel_fmax"],
        })
        out_dir = self.path(options["out"])
        out_dir.mkdir(parents=True, exist_ok=True)

        if options["synthetic"] is not None:
            rows, inputs, extra = self.prepare_synthetic(options, grid, out_dir)
        else:
            rows, inputs, extra = self.prepare_manifest(options, grid, out_dir)

        manifest_path = write_pieces_manifest(rows, out_dir)
        self.register(rows, out_dir)
        self.write_manifest(
            out_dir,
            config={"grid": grid.to_dict(), **extra},
            inputs=inputs,
            outputs={"pieces": manifest_path},
        )
        self.stdout.write(self.style.SUCCESS(f"Prepared {len(rows)} pieces in {out_dir}"))

    def prepare_synthetic(self, options, grid, out_dir):
        n_pieces = options["synthetic"]
        if n_pieces < len(STYLE_CELLS):
            raise CommandError(f"--synthetic needs at least {len(STYLE_CELLS)} pieces")
        settings_values = resolve_config(
            {"piece_seconds": defaults()["SYNTHETIC_PIECE_SECONDS"]},
            config_section(self.config_file, "synthetic"),
            {"piece_seconds": options["piece_seconds"]},
        )
        piece_seconds = settings_values["piece_seconds"]

        rows = []
        for toy in generate_corpus(self.seed, n_pieces, piece_seconds, grid):
            piece = toy.to_arrays(grid)
            archive = f"{toy.name}.npz"
            save_piece(piece, out_dir / archive, grid)
            rows.append(self.row(piece, archive, split_for_group(toy.group),
                                 toy.style.articulation_mode, toy.style.dynamics_mode))
        return rows, {"synthetic": n_pieces}, {"synthetic": {"piece_seconds": piece_seconds}}

    def prepare_manifest(self, options, grid, out_dir):
        manifest_path = self.path(options["manifest"])
        if not manifest_path.exists():
            raise CommandError(f"Manifest {manifest_path} does not exist")
        table = read_manifest(manifest_path)

        rows, used_names, failed = [], set(), 0
        for index, entry in table.iterrows():
            try:
                piece, _ = prepare_piece(entry["midi_path"], entry["audio_path"], grid)
            except (PianoSynthError, OSError) as e:
                failed += 1
                logger.warning(f"Skipping {entry['midi_path']}: {e}")
                continue
            name = piece.name
            if name in used_names:
                name = f"{name}-{index}"
            used_names.add(name)
            piece.name = name
            archive = f"{name}.npz"
            save_piece(piece, out_dir / archive, grid)
            rows.append(self.row(piece, archive, entry["split"]))

        if not rows:
            raise CommandError(f"All {failed} pieces in {manifest_path} failed to prepare")
        if failed:
            self.stdout.write(self.style.WARNING(f"Skipped {failed} unreadable pieces"))
        return rows, {"manifest": manifest_path}, {}

    def row(self, piece, archive, split, articulation="", dynamics=""):
        summary = piece.summary()
        self.stdout.write(
            f"{summary['name']}: T={summary['n_frames']} notes={summary['n_notes']} "
            f"c_art=1 {summary['art_fraction']:.1%} c_dyn=1 {summary['dyn_fraction']:.1%} [{split}]")
        return {
            **summary,
            "archive": archive,
            "split": split,
            "articulation": articulation,
            "dynamics": dynamics,
        }

    def register(self, rows, out_dir):
        for row in rows:
            style_cell = f"{row['articulation']}-{row['dynamics']}" if row["articulation"] else ""
            Piece.objects.update_or_create(
                data_dir=str(out_dir),
                name=row["name"],
                defaults={
                    "archive": row["archive"],
                    "split": row["split"],
                    "n_frames": row["n_frames"],
                    "n_notes": row["n_notes"],
                    "art_fraction": row["art_fraction"],
                    "dyn_fraction": row["dyn_fraction"],
                    "style_cell": style_cell,
                },
            )
