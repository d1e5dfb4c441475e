"""Exception hierarchy for the stratified replay library and harness."""


class SerError(Exception):
    """Base error. Carries a human-readable ``detail`` like an API error body."""

    def __init__(self, detail: str) -> None:
        super().__init__(detail)
        self.detail = detail


class EmptyMemoryError(SerError):
    """Raised when sampling from a replay memory that holds no transitions."""


class EpisodeFinishedError(SerError):
    """Raised when stepping an episode that already terminated or was truncated."""


class InvalidModelError(SerError):
    """Raised when a tabular MDP description violates its invariants."""


class ShapeMismatchError(SerError):
    """Raised when arrays or parameter structures disagree in shape."""


class ConvergenceError(SerError):
    """Raised when an iterative oracle hits its iteration cap."""


class ConfigError(SerError):
    """Raised for configuration problems that field validation cannot catch."""


class TrialError(SerError):
    """Raised when a single trial fails; remembers which seed it was."""

    def __init__(self, seed: int, detail: str) -> None:
        super().__init__(f"trial seed={seed} failed: {detail}")
        self.seed = seed
        self.cause = detail

    def __reduce__(self) -> tuple[type["TrialError"], tuple[int, str]]:
        # Worker processes send errors back pickled.
        return (type(self), (self.seed, self.cause))
