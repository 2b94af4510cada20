class MoelabError(Exception):
    """Base class for every error raised by moelab."""


class ConfigError(MoelabError, ValueError):
    """A configuration violates one of its invariants."""


class InputError(MoelabError, ValueError):
    """An input value (tokens, ids, files) is malformed or out of range."""


class TrainingError(MoelabError, RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
