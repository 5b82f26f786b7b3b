"""Exception hierarchy shared across the toolkit.

Two top-level families map onto the CLI exit codes: ``DomainError`` (bad
inputs, violated contracts -> exit 1) and ``EnvError`` (I/O, network,
backend trouble -> exit 2).
"""


class DidexError(Exception):
    """Base class for all toolkit errors."""


class DomainError(DidexError):
    """Invalid inputs or violated data contracts."""


class EnvError(DidexError):
    """Environment problems: filesystem, network, remote backend."""


class BackendTimeout(EnvError):
    """Backend did not answer within the deadline after all retries."""


class BackendRejection(EnvError):
    """Backend answered with a non-success status."""

    def __init__(self, status: int, message: str):
        super().__init__(f"backend rejected request (status {status}): {message}")
        self.status = status
        self.message = message


class BackendProtocolError(EnvError):
    """Backend answered with something the client cannot decode."""


class DivergenceError(DidexError):
    """Training produced a non-finite loss."""
