"""Exception roots shared by every patchbench module."""


class PatchbenchError(Exception):
    """Runtime failure. The CLI exits with status 1."""


class ValidationError(PatchbenchError):
    """Bad input or configuration. The CLI exits with status 2."""


class ConfigError(ValidationError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class IoFailure(PatchbenchError):
    pass
