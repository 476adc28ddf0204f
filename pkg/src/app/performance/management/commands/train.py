import logging
from dataclasses import replace

from django.core.management.base import CommandError

from ...exceptions import ConfigError, PianoSynthError
from ...management.base import PipelineCommand
from ...models import TrainingRun
from ...representation import load_split
from ...runs import config_section, defaults, resolve_config, resolve_grid
from ...trainer import (
    METRICS_FILE, TrainConfig, fit, init_state, latest_checkpoint, load_checkpoint,
)

logger = logging.getLogger(__name__)

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "max_steps": int,
    "batch_size": int,
    "learning_rate": float,
    "kl_warmup_fraction": float,
    "ce_weight": float,
    "crop_seconds": float,
    "eval_every": int,
    "checkpoint_every": int,
    "log_every": int,
    "grad_clip": float,
    "latent_dim": int,
    "hidden_size": int,
    "num_layers": int,
}


class Command(PipelineCommand):
    help = "Train the performance VAE on a prepared data directory"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--data", default="data", help="prepared data directory")
        parser.add_argument("--out", default="runs/default", help="run directory")
        parser.add_argument("--resume", action="store_true",
                            help="continue from the newest checkpoint in --out")
        parser.add_argument("--detach-ce-latent", action="store_const", const=True,
                            help="train the auxiliary classifier on detached latents")
        for name, kind in TRAIN_FLAGS.items():
            parser.add_argument(f"--{name.replace('_', '-')}", type=kind)

    def run(self, **options):
        data_dir = self.path(options["data"])
        out_dir = self.path(options["out"])
        try:
            train_pieces, grid = load_split(data_dir, "train")
        except FileNotFoundError as e:
            raise CommandError(f"Prepared data missing in {data_dir}: {e}") from e
        try:
            eval_pieces, _ = load_split(data_dir, "validation")
        except ConfigError:
            logger.info(f"No validation split in {data_dir}; periodic evaluation disabled")
            eval_pieces = []
        grid = grid or resolve_grid(self.config_file)

        flags = {name: options[name] for name in TRAIN_FLAGS}
        flags["detach_ce_latent"] = options["detach_ce_latent"]
        if options["resume"]:
            state = self.resume(out_dir, options["max_steps"])
        else:
            base = replace(TrainConfig(), seed=defaults()["SEED"]).to_dict()
            flags["seed"] = options["seed"]
            config = TrainConfig.from_dict(
                resolve_config(base, config_section(self.config_file, "train"), flags))
            state = init_state(config)
        self.seed = state.config.seed

        run, _ = TrainingRun.objects.update_or_create(
            out_dir=str(out_dir),
            defaults={
                "data_dir": str(data_dir),
                "config": state.config.to_dict(),
                "seed": state.config.seed,
                "step": state.step,
                "max_steps": state.config.max_steps,
                "status": TrainingRun.RUNNING,
            },
        )

        def on_checkpoint(state, path, losses):
            run.step = state.step
            run.last_checkpoint = str(path)
            run.final_recon = float(losses.recon)
            run.save()

        try:
            state = fit(state, train_pieces, grid, out_dir,
                        eval_pieces=eval_pieces, on_checkpoint=on_checkpoint)
        except (PianoSynthError, OSError):
            run.status = TrainingRun.FAILED
            run.save()
            raise

        run.status = TrainingRun.FINISHED
        run.save()
        self.write_manifest(
            out_dir,
            config={"train": state.config.to_dict(), "grid": grid.to_dict()},
            inputs={"data": data_dir},
            outputs={"checkpoint": run.last_checkpoint, "metrics": out_dir / METRICS_FILE},
        )
        self.stdout.write(self.style.SUCCESS(
            f"Trained to step {state.step}; checkpoint {run.last_checkpoint}"))

    def resume(self, out_dir, max_steps):
        checkpoint = latest_checkpoint(out_dir)
        if checkpoint is None:
            raise CommandError(f"No checkpoint to resume from in {out_dir}")
        state = load_checkpoint(checkpoint)
        if max_steps is not None:
            state.config = replace(state.config, max_steps=max_steps)
        logger.info(f"Resuming from {checkpoint.name} at step {state.step}")
        return state
