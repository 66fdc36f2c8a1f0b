class XfrnError(Exception):
    exit_code = 1


class ConfigError(XfrnError):
    """Invalid or inconsistent configuration (missing paths, bad values)."""

    exit_code = 2


class DataError(XfrnError):
    """Malformed input data: corpora, capture files, shape mismatches."""

    exit_code = 3


class ModelError(XfrnError):
    """Model adapter failures, invalid masks, context overflow."""

    exit_code = 4
