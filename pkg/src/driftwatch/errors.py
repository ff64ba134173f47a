"""Exception taxonomy for the driftwatch pipeline.

Config problems (bad parameters, missing inputs) and data problems
(malformed records) are kept distinct so the CLI can map them to distinct
exit codes. Contract errors indicate caller bugs, not bad data.
"""


class DriftwatchError(Exception):
    """Base class for all driftwatch errors."""


class ConfigError(DriftwatchError):
    """Invalid configuration, scenario, or parameter combination."""


class DataError(DriftwatchError):
    """Malformed or inconsistent input data (frames, masks, records)."""


class ContractError(DriftwatchError):
    """An operation was invoked in violation of its preconditions."""


class EstimationError(DriftwatchError):
    """A numeric estimation step failed (e.g. singular transform)."""


class EmptyMaskError(ContractError):
    """An operation requiring set pixels received an empty mask."""


class NoContainersError(ContractError):
    """A per-frame statistic was requested with no tracked containers."""
