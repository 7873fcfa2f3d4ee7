"""Exception types shared across the package.

Most precondition violations raise plain ValueError with a descriptive
message; the types below exist where callers need to catch a specific
failure mode programmatically.
"""


class DecodeError(Exception):
    """Raised when an entropy-coded payload cannot be decoded."""


class ConfigError(ValueError):
    """Configuration rejected during validation.

    Carries the dotted path of the offending field so manifest errors
    point at the exact entry.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")
