"""Exception types shared across capforge."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class NumericFault(ArithmeticError):
    """A NaN or infinity appeared; the message names the producing op."""


class DataError(ValueError):
    """Malformed dataset, config, or checkpoint contents."""
