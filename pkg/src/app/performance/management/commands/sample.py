import numpy as np

from ...management.base import PipelineCommand
from ...render import emit_figure, sample_prior_latents, synthesize


class Command(PipelineCommand):
    help = "Render a piece with style latents drawn from the conditional priors"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_render_arguments(parser)
        parser.add_argument("--piece", required=True, help="piece archive (.npz)")
        parser.add_argument("--art", type=int, choices=(0, 1),
                            help="constant articulation label (default: the piece's own labels)")
        parser.add_argument("--dyn", type=int, choices=(0, 1),
                            help="constant dynamics label (default: the piece's own labels)")

    def run(self, **options):
        iterations = self.render_iterations(options)
        state = self.load_checkpoint(options["checkpoint"])
        model = state.model.eval()
        piece, grid = self.load_archive(options["piece"])
        out_dir = self.path(options["out"])

        c_art = piece.c_art if options["art"] is None else np.full(piece.n_frames, options["art"])
        c_dyn = piece.c_dyn if options["dyn"] is None else np.full(piece.n_frames, options["dyn"])
        z_art = sample_prior_latents(model.prior("art"), c_art, seed=self.seed)
        z_dyn = sample_prior_latents(model.prior("dyn"), c_dyn, seed=self.seed + 1)
        mel = synthesize(piece.onset, z_art, z_dyn, model.decoder)

        outputs = self.export_render(out_dir, "sample", mel, z_art, z_dyn, grid, iterations)
        outputs["figure"] = emit_figure([mel], [f"prior sample: {piece.name}"], out_dir / "sample.png")
        self.write_manifest(
            out_dir,
            config={"art": options["art"], "dyn": options["dyn"],
                    "iterations": iterations, "train": state.config.to_dict()},
            inputs={"checkpoint": options["checkpoint"], "piece": options["piece"]},
            outputs=outputs,
        )
        self.stdout.write(self.style.SUCCESS(f"Sampled a rendering of {piece.name} to {out_dir}"))
