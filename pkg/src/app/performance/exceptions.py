class PianoSynthError(Exception):
    """Base class for every error raised by the synthesis pipeline."""


class ConfigError(PianoSynthError, ValueError):
    pass


class MidiParseError(PianoSynthError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class RasterizeError(PianoSynthError, ValueError):
    def __init__(self, message, events=()):
        self.events = list(events)
        super().__init__(message)


class AudioFormatError(PianoSynthError, ValueError):
    pass


class CropError(PianoSynthError, ValueError):
    pass


class ShapeMismatchError(PianoSynthError, ValueError):
    pass


class EmptySequenceError(PianoSynthError, ValueError):
    pass


class NonFiniteError(PianoSynthError, FloatingPointError):
    """A loss term or input tensor contains NaN or infinity."""

    def __init__(self, term, message=None):
        self.term = term
        super().__init__(message or f"non-finite value in '{term}'")


class CheckpointError(PianoSynthError):
    pass
