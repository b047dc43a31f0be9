"""Error taxonomy shared across modules, mapped to CLI exit codes."""


class DataError(Exception):
    """Malformed or missing input data (datasets, checkpoints, files)."""


class NumericalError(Exception):
    """Optimization or numerics failure (divergence, degenerate fields)."""
