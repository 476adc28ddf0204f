import pandas as pd

from ...management.base import PipelineCommand
from ...representation import load_split
from ...trainer import evaluate


class Command(PipelineCommand):
    help = "Report reconstruction, KL and condition accuracy of a checkpoint on one split"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--data", default="data", help="prepared data directory")
        parser.add_argument("--split", default="validation")
        parser.add_argument("--out", help="report CSV (default: next to the checkpoint)")

    def run(self, **options):
        checkpoint = self.path(options["checkpoint"])
        state = self.load_checkpoint(checkpoint)
        data_dir = self.path(options["data"])
        pieces, _ = load_split(data_dir, options["split"])

        metrics = evaluate(pieces, state)
        report = (self.path(options["out"]) if options["out"]
                  else checkpoint.parent / f"eval-{options['split']}-{state.step:07d}.csv")
        report.parent.mkdir(parents=True, exist_ok=True)
        row = {"checkpoint": str(checkpoint), "step": state.step, "split": options["split"],
               "n_pieces": len(pieces), **metrics.as_dict()}
        pd.DataFrame([row]).to_csv(report, index=False)

        self.stdout.write(
            f"{options['split']} ({len(pieces)} pieces, {metrics.n_frames} frames): "
            f"recon={metrics.recon:.4f} kl_art={metrics.kl_art:.4f} kl_dyn={metrics.kl_dyn:.4f} "
            f"acc_art={metrics.condition_accuracy_art:.3f} "
            f"acc_dyn={metrics.condition_accuracy_dyn:.3f}")
        self.write_manifest(
            report.parent,
            config={"split": options["split"], "train": state.config.to_dict()},
            inputs={"checkpoint": checkpoint, "data": data_dir},
            outputs={"report": report},
        )
        self.stdout.write(self.style.SUCCESS(f"Wrote {report}"))
