"""Exception hierarchy shared across the pipeline."""


class GlamError(Exception):
    """Base class for every error raised by this package."""


class ParseError(GlamError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class VersionError(GlamError):
    pass


class SchemaError(GlamError):
    pass


class AdapterError(GlamError):
    pass


class FormatError(GlamError):
    pass


class ShapeError(GlamError):
    pass


class ContractError(GlamError):
    pass


class EmptySegment(GlamError):
    pass
