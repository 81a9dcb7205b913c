class ShapeError(ValueError):
    """Dimension mismatch between vectors, parameters, or cluster sets."""


class FormatError(ValueError):
    """Malformed input file (IDX data, ledger export)."""


class ConfigError(ValueError):
    """Invalid scenario configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
