"""Exception types shared across the pipeline.

Contract/data errors derive from :class:`DataError` so the CLI can map them to
exit code 2 without catching programming errors.
"""


class DataError(Exception):
    """Input data violates a contract (bad file, bad config, bad pairing)."""


class MissingColumn(DataError):
    def __init__(self, path, source, columns):
        self.path = path
        self.source = source
        self.columns = list(columns)
        super().__init__(
            f"{path}: table '{source}' is missing required column(s): {', '.join(self.columns)}"
        )


class NoTimestamp(DataError):
    pass


class EmptyCohort(DataError):
    pass


class TooFewPatients(DataError):
    pass


class EmptyDataset(DataError):
    pass


class InvalidConfig(DataError, ValueError):
    pass


class IdOutOfRange(DataError):
    pass


class NonFiniteActivation(ArithmeticError):
    def __init__(self, layer):
        self.layer = layer
        super().__init__(f"non-finite activation in layer '{layer}'")


class NonFiniteGradient(ArithmeticError):
    pass


class StaleCache(RuntimeError):
    """Parameters changed between the forward pass and the backward pass."""


class Diverged(ArithmeticError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptFile(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class UnpairedSets(DataError):
    pass
