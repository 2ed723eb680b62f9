"""Structured errors for the exporter."""


class ExportError(Exception):
    """Base class for everything this package raises on purpose."""


class BadConfig(ExportError):
    pass


class ModelLoadFailure(ExportError):
    pass


class UnreadableImage(ExportError):
    pass


class SizeMismatch(ExportError):
    pass
