class InvalidArgument(ValueError):
    """Raised when an argument violates an operation's precondition."""


class DatasetFormatError(ValueError):
    """Malformed dataset file. Carries the byte offset or line number at fault."""

    def __init__(self, message, path=None, offset=None, line=None):
        self.path = path
        self.offset = offset
        self.line = line
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class GridCellError(RuntimeError):
    """A training or evaluation job inside the accuracy grid failed."""

    def __init__(self, row, column, cause):
        self.row = row
        self.column = column
        self.cause = cause
        super().__init__(f"grid cell (row={row!r}, column={column!r}) failed: {cause}")
