from django.core.exceptions import ValidationError
from django.core.validators import MinValueValidator, MaxValueValidator
from simple_history.models import HistoricalRecords
from django.db import models

SPLITS = ("train", "validation", "test")


class Piece(models.Model):
    """Registry row for one prepared piece archive; the archive itself is the source of truth."""

    created_at = models.DateTimeField(auto_now_add=True)
    last_modified = models.DateTimeField(auto_now=True)
    name = models.CharField(max_length=200)
    data_dir = models.CharField(max_length=500)
    archive = models.CharField(max_length=500)
    split = models.CharField(max_length=20, choices=[(s, s) for s in SPLITS])
    n_frames = models.PositiveIntegerField()
    n_notes = models.PositiveIntegerField()
    art_fraction = models.FloatField(
        validators=[MinValueValidator(0.0), MaxValueValidator(1.0)]
    )
    dyn_fraction = models.FloatField(
        validators=[MinValueValidator(0.0), MaxValueValidator(1.0)]
    )
    # Synthetic pieces only, e.g. "staccato-loud"
    style_cell = models.CharField(max_length=40, blank=True, default="")
    history = HistoricalRecords(
        table_name="piece_history",
        excluded_fields=['last_modified'],
    )

    class Meta:
        constraints = [
            models.UniqueConstraint(fields=["data_dir", "name"], name="unique_piece_per_data_dir"),
        ]

    def __str__(self):
        return f"{self.name} [{self.split}] ({self.n_frames} frames)"

    def clean(self):
        super().clean()
        if self.n_frames == 0 and self.n_notes > 0:
            raise ValidationError("A piece without frames cannot contain notes")


class TrainingRun(models.Model):
    RUNNING = "running"
    FINISHED = "finished"
    FAILED = "failed"
    STATUSES = [(RUNNING, "Running"), (FINISHED, "Finished"), (FAILED, "Failed")]

    created_at = models.DateTimeField(auto_now_add=True)
    last_modified = models.DateTimeField(auto_now=True)
    out_dir = models.CharField(max_length=500, unique=True)
    data_dir = models.CharField(max_length=500)
    config = models.JSONField(default=dict)
    seed = models.PositiveIntegerField(default=0)
    step = models.PositiveIntegerField(default=0)
    max_steps = models.PositiveIntegerField(validators=[MinValueValidator(1)])
    status = models.CharField(max_length=20, choices=STATUSES, default=RUNNING)
    last_checkpoint = models.CharField(max_length=500, blank=True, default="")
    final_recon = models.FloatField(null=True, blank=True)
    history = HistoricalRecords(
        table_name="training_run_history",
        excluded_fields=['last_modified'],
    )

    def __str__(self):
        return f"{self.out_dir} | step {self.step}/{self.max_steps} | {self.status}"

    def progress(self):
        return min(1.0, self.step / self.max_steps)

    def clean(self):
        super().clean()
        if self.step > self.max_steps:
            raise ValidationError(
                f"Step {self.step} is beyond max_steps {self.max_steps}")
        if self.status == self.FINISHED and not self.last_checkpoint:
            raise ValidationError("A finished run needs a checkpoint")
