"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or incompatible inputs.

    ``path`` names the offending field (dotted, e.g. ``training.rounds``)
    when the error comes from a config document.
    """

    def __init__(self, message, path=None):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class CalibrationError(RuntimeError):
    """Violation injection could not hit the requested rate."""


class DegenerateRoundError(RuntimeError):
    """Every participant had a zero validity score; nothing to aggregate."""


class DivergedClientError(RuntimeError):
    def __init__(self, client_id):
        self.client_id = client_id
        super().__init__(f"client {client_id} produced a non-finite update")
