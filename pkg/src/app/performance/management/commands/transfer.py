from ...management.base import PipelineCommand
from ...render import (
    STYLE_MODES, emit_figure, mean_frame_energy, note_sustain_frames, transfer,
)


class Command(PipelineCommand):
    help = "Render the notes of one piece in the performance style of another"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_render_arguments(parser)
        parser.add_argument("--content", required=True, help="archive providing the notes")
        parser.add_argument("--style", required=True, help="archive providing the style")
        parser.add_argument("--mode", choices=STYLE_MODES, default="mean",
                            help="posterior mean (deterministic) or a seeded sample")

    def run(self, **options):
        iterations = self.render_iterations(options)
        state = self.load_checkpoint(options["checkpoint"])
        model = state.model.eval()
        content, grid = self.load_archive(options["content"])
        style, _ = self.load_archive(options["style"])
        out_dir = self.path(options["out"])

        mel, latents = transfer(model, content.onset, style.mel, mode=options["mode"], seed=self.seed)
        aligned = latents.aligned(content.n_frames)
        outputs = self.export_render(
            out_dir, "transfer", mel, aligned.z_art, aligned.z_dyn, grid, iterations)
        outputs["figure"] = emit_figure(
            [style.mel, content.mel, mel],
            [f"style: {style.name}", f"content: {content.name}", "output"],
            out_dir / "transfer.png",
        )

        for label, spectrogram, onset in (("style", style.mel, style.onset),
                                          ("content", content.mel, content.onset),
                                          ("output", mel, content.onset)):
            self.stdout.write(
                f"{label}: sustain {note_sustain_frames(spectrogram, onset):.2f} frames/note, "
                f"energy {mean_frame_energy(spectrogram):.4f}")

        self.write_manifest(
            out_dir,
            config={"mode": options["mode"], "iterations": iterations,
                    "train": state.config.to_dict()},
            inputs={"checkpoint": options["checkpoint"], "content": options["content"],
                    "style": options["style"]},
            outputs=outputs,
        )
        self.stdout.write(self.style.SUCCESS(f"Transferred {style.name} onto {content.name}"))
