"""Exception hierarchy shared by every stage of the pipeline.

Each family carries an ``exit_code`` so the command-line driver can map
failures to distinct process exit statuses.
"""


class CKBSimError(Exception):
    exit_code = 1


class ConfigError(CKBSimError, ValueError):
    exit_code = 2


class DataError(CKBSimError):
    exit_code = 3


class NumericError(CKBSimError, ArithmeticError):
    exit_code = 4


class DimensionError(CKBSimError, ValueError):
    exit_code = 5


class DegenerateGeometryError(CKBSimError, ValueError):
    exit_code = 6


class DegenerateChannelError(NumericError):
    pass


class DomainError(NumericError, ValueError):
    pass


class TrajectoryRangeError(ConfigError, IndexError):
    pass


class KnowledgeLookupError(DataError, KeyError):
    pass


class DatasetVersionError(DataError):
    code = "version-mismatch"


class TruncatedRecordError(DataError):
    code = "truncated-record"

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"record {index} is truncated")


class ChecksumError(DataError):
    code = "checksum-failure"

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"record {index} failed its checksum")


class SchemaError(DataError):
    code = "schema"

    def __init__(self, message, missing=(), unexpected=()):
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        super().__init__(message)


class ConsistencyError(CKBSimError, ValueError):
    exit_code = 5
