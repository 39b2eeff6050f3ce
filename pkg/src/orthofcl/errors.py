"""The exception classes of `orthofcl`."""


class OrthoFCLError(Exception):
    """Base class of every error raised by `orthofcl`."""


class ConfigError(OrthoFCLError, ValueError):
    """An invalid configuration value or violated precondition."""


class DimensionError(OrthoFCLError, ValueError):
    """Operand shapes do not match."""


class ContractError(OrthoFCLError, ValueError):
    """An argument breaks a documented contract, e.g. a basis that is not
    orthonormal."""


class DataError(OrthoFCLError, ValueError):
    """Invalid samples or labels."""


class ParseError(DataError):
    """A raster file could not be parsed.

    Parameters
    ----------
    message : str
        The error message.
    offset : int | None, optional
        The byte offset of the failure, for binary formats.
    line : int | None, optional
        The 1-based line number of the failure, for text formats.
    """

    def __init__(
        self, message: str, *, offset: int | None = None, line: int | None = None
    ) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if line is not None:
            message = f"{message} (at line {line})"

        super().__init__(message)
        self.offset = offset
        self.line = line


class FormatError(OrthoFCLError, ValueError):
    """A checkpoint file is malformed.

    Parameters
    ----------
    message : str
        The error message.
    offset : int
        The byte offset at which reading failed.
    """

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(FormatError):
    """A checkpoint was written by an unsupported format version."""


class NumericalError(OrthoFCLError, ArithmeticError):
    """A numerical routine failed.

    Parameters
    ----------
    message : str
        The error message.
    iterations : int | None, optional
        The iteration count reached before giving up, if relevant.
    """

    def __init__(self, message: str, *, iterations: int | None = None) -> None:
        super().__init__(message)
        self.iterations = iterations


class RankError(NumericalError):
    """A matrix is numerically rank deficient.

    Parameters
    ----------
    message : str
        The error message.
    column : int | None, optional
        The index of the first column found to be dependent.
    """

    def __init__(self, message: str, *, column: int | None = None) -> None:
        super().__init__(message)
        self.column = column


class CapacityError(NumericalError):
    """No room is left orthogonal to the subspace memory.

    Parameters
    ----------
    message : str
        The error message.
    layer : int | None, optional
        The encoder layer of the exhausted memory.
    projection : str | None, optional
        The projection (`"key"` or `"value"`) of the exhausted memory.
    """

    def __init__(
        self,
        message: str,
        *,
        layer: int | None = None,
        projection: str | None = None,
    ) -> None:
        if layer is not None:
            message = f"layer {layer} {projection}: {message}"

        super().__init__(message)
        self.layer = layer
        self.projection = projection


class StateError(OrthoFCLError, RuntimeError):
    """An operation was called in the wrong model or report state."""


class ProtocolError(OrthoFCLError, RuntimeError):
    """A client message does not fit the federated protocol.

    Parameters
    ----------
    message : str
        The error message.
    client_id : int
        The client that sent the offending message.
    """

    def __init__(self, message: str, client_id: int) -> None:
        super().__init__(f"client {client_id}: {message}")
        self.client_id = client_id
