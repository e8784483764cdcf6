class SolverError(RuntimeError):
    """A solver stopped without meeting its tolerance.

    ``best`` carries the best iterate found and ``info`` a dict of
    diagnostics (step index, final violation, ...).
    """

    def __init__(self, message, best=None, **info):
        super().__init__(message)
        self.best = best
        self.info = info


class ConvergenceError(SolverError):
    pass


class ForwardBlowUpError(SolverError):
    pass


class ConfigError(ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
