import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from ..exceptions import ConfigError, PianoSynthError
from ..representation import load_piece
from ..render import mel_to_audio, save_latents, write_wav
from ..runs import RunManifest, config_section, defaults, resolve_config, resolve_grid, resolve_path
from ..trainer import load_checkpoint

logger = logging.getLogger(__name__)


class PipelineCommand(BaseCommand):
    """
    Shared flags (--workdir, --config, --seed) and error translation: domain
    errors become CommandError so the process exits nonzero.
    """

    def add_arguments(self, parser):
        parser.add_argument("--workdir", help="base directory for relative paths")
        parser.add_argument("--config", help="JSON config file (overridden by flags)")
        parser.add_argument("--seed", type=int, help="random seed")

    def add_render_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--out", required=True, help="output directory")
        parser.add_argument("--iterations", type=int,
                            help="phase reconstruction iterations (config section `render`)")

    def handle(self, *args, **options):
        self.workdir = options["workdir"] or defaults()["WORKDIR"]
        config_file = options["config"]
        self.config_file = self.path(config_file) if config_file else None
        self.seed = options["seed"] if options["seed"] is not None else defaults()["SEED"]
        try:
            return self.run(**options)
        except PianoSynthError as e:
            logger.error(f"{self.command_name()} failed: {e}")
            raise CommandError(str(e)) from e
        except OSError as e:
            raise CommandError(f"I/O error: {e}") from e

    def run(self, **options):
        raise NotImplementedError

    def command_name(self):
        return self.__module__.rsplit(".", 1)[-1]

    def path(self, value):
        return resolve_path(value, self.workdir)

    def load_checkpoint(self, value):
        path = self.path(value)
        if not path.exists():
            raise CommandError(f"Checkpoint {path} does not exist")
        return load_checkpoint(path)

    def load_archive(self, value):
        path = self.path(value)
        if not path.exists():
            raise CommandError(f"Piece archive {path} does not exist")
        piece, grid = load_piece(path)
        return piece, grid or resolve_grid(self.config_file)

    def render_iterations(self, options):
        iterations = resolve_config(
            {"iterations": defaults()["GRIFFIN_LIM_ITERATIONS"]},
            config_section(self.config_file, "render"),
            {"iterations": options["iterations"]},
        )["iterations"]
        if not isinstance(iterations, int) or iterations < 1:
            raise ConfigError(f"iterations must be a positive integer, got {iterations!r}")
        return iterations

    def export_render(self, out_dir, tag, mel, z_art, z_dyn, grid, iterations):
        """WAV plus latent archive for one rendered spectrogram."""
        audio = mel_to_audio(mel, grid, n_iterations=iterations, seed=self.seed)
        return {
            f"{tag}.wav": write_wav(out_dir / f"{tag}.wav", audio, grid.sample_rate),
            f"{tag}.latents": save_latents(out_dir / f"{tag}.latents.npz", z_art, z_dyn, mel=mel),
        }

    def write_manifest(self, out_dir, config, inputs, outputs):
        manifest = RunManifest(
            command=self.command_name(),
            config=config,
            inputs={k: str(v) for k, v in inputs.items()},
            outputs={k: str(v) for k, v in outputs.items()},
            seed=self.seed,
        )
        return manifest.write(Path(out_dir))
