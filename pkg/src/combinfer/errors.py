"""Exception hierarchy shared by every module."""


class CombinferError(Exception):
    """Base class for all runtime errors raised by this package."""


class AddressCollision(CombinferError):
    def __init__(self, address):
        super().__init__(f"address {address!r} appears on both sides of a disjoint union")
        self.address = address


class DuplicateAddress(CombinferError):
    def __init__(self, address):
        super().__init__(f"address {address!r} used twice in one execution")
        self.address = address


class IncompleteTrace(CombinferError):
    def __init__(self, address):
        super().__init__(f"trace has no value at sample address {address!r}")
        self.address = address


class KernelHasObserve(CombinferError):
    """An extend kernel produced density entries that are not in its trace."""


class AllZeroWeights(CombinferError):
    """Every incoming log weight along the resampling dim is -inf."""


class ShapeMismatch(CombinferError, ValueError):
    pass


class NotReparameterizable(CombinferError):
    pass


class NonScalarRoot(CombinferError):
    pass


class DegenerateWeights(CombinferError):
    pass


class ArityMismatch(CombinferError):
    pass


class GrammarError(CombinferError, TypeError):
    """A combinator received an argument outside its grammar class."""


class ConfigError(CombinferError, ValueError):
    pass
