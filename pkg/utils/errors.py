"""Error types shared by every module.

The three families map onto the CLI exit-code contract: validation problems
exit 2, missing or short data exits 3, solver failures that escape a pipeline
exit 4.
"""


class HashAllocError(ValueError):
    exit_code = 4


# --- exit 2 ---
class ValidationError(HashAllocError):
    exit_code = 2


class ParseError(ValidationError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class NonPositivePrice(ParseError):
    pass


class UnsortedTimestamps(ParseError):
    pass


class GapTooLong(ParseError):
    pass


class UnknownChain(ParseError):
    pass


class DuplicateBlock(ParseError):
    pass


class NonPositiveInput(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class DegenerateVariance(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


# --- exit 3 ---
class DataInsufficiencyError(HashAllocError):
    exit_code = 3


class InsufficientHistory(DataInsufficiencyError):
    pass


class UnknownMiner(DataInsufficiencyError):
    pass


class MissingDifficulty(DataInsufficiencyError):
    pass


class ZeroTotalWeight(DataInsufficiencyError):
    pass


# --- exit 4 ---
class SolverError(HashAllocError):
    exit_code = 4


class InfeasibleRisk(SolverError):
    def __init__(self, rho, min_risk):
        self.rho = rho
        self.min_risk = min_risk
        super().__init__(f"risk tolerance {rho:.6g} is below the minimum-variance risk {min_risk:.6g}")


class SingularVolatility(SolverError):
    pass


class ZeroAllocationAfter(SolverError):
    """An allocation component of w(t+dt) is zero, so the predicted IBT is unbounded."""

    def __init__(self, chain_index):
        self.chain_index = chain_index
        super().__init__(f"allocation after the change is zero on chain index {chain_index}; IBT is unbounded")
