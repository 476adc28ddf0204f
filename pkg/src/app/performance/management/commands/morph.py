from django.core.management.base import CommandError

from ...management.base import PipelineCommand
from ...networks import FACTORS
from ...render import (
    FIGURE_SCENARIOS, MorphSpec, emit_figure, mean_frame_energy, note_sustain_frames,
    scenario_latents, synthesize,
)


class Command(PipelineCommand):
    help = "Render a piece while gradually morphing articulation or dynamics"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_render_arguments(parser)
        parser.add_argument("--piece", required=True, help="piece archive (.npz)")
        parser.add_argument("--factor", choices=FACTORS, default="art")
        parser.add_argument("--from", dest="from_component", type=int, default=0)
        parser.add_argument("--to", dest="to_component", type=int, default=1)
        parser.add_argument("--fixed-other", type=int, default=0,
                            help="component held by the factor that is not morphed")
        parser.add_argument("--all-scenarios", action="store_true",
                            help="render the four art/dyn scenarios as a 2x2 figure")

    def run(self, **options):
        if options["all_scenarios"]:
            scenarios = FIGURE_SCENARIOS
        else:
            try:
                scenarios = [MorphSpec(
                    options["factor"], options["from_component"], options["to_component"],
                    fixed_other=options["fixed_other"])]
            except ValueError as e:
                raise CommandError(str(e)) from e

        iterations = self.render_iterations(options)
        state = self.load_checkpoint(options["checkpoint"])
        model = state.model.eval()
        piece, grid = self.load_archive(options["piece"])
        out_dir = self.path(options["out"])

        panels, labels, outputs = [], [], {}
        for spec in scenarios:
            z_art, z_dyn = scenario_latents(model, spec, piece.n_frames)
            mel = synthesize(piece.onset, z_art, z_dyn, model.decoder)
            tag = (f"morph-{spec.factor}-{spec.from_component}to{spec.to_component}"
                   f"-{spec.other_factor}{spec.fixed_other}")
            outputs.update(self.export_render(
                out_dir, tag, mel, z_art, z_dyn, grid, iterations))
            panels.append(mel)
            labels.append(spec.label)
            self.stdout.write(
                f"{tag}: sustain {note_sustain_frames(mel, piece.onset):.2f} frames/note, "
                f"energy {mean_frame_energy(mel):.4f}")

        outputs["figure"] = emit_figure(panels, labels, out_dir / "morph.png", title=piece.name)
        self.write_manifest(
            out_dir,
            config={
                "scenarios": [spec.label for spec in scenarios],
                "iterations": iterations,
                "train": state.config.to_dict(),
            },
            inputs={"checkpoint": options["checkpoint"], "piece": options["piece"]},
            outputs=outputs,
        )
        self.stdout.write(self.style.SUCCESS(f"Rendered {len(scenarios)} morphs to {out_dir}"))
