"""Exception hierarchy shared across the package."""


class RepError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(RepError, ValueError):
    pass


class NonPositiveDiagonal(RepError, ValueError):
    pass


class DimMismatch(RepError, ValueError):
    pass


class InvalidDof(RepError, ValueError):
    pass


class ProbabilityOutOfRange(RepError, ValueError):
    pass


class RankDeficient(RepError, ValueError):
    pass


class TooFewRows(RepError, ValueError):
    pass


class NotNested(RepError, ValueError):
    pass


class MleFailure(RepError, RuntimeError):
    """Newton-Raphson for the (multinomial) logit did not reach a maximum."""


class Separation(MleFailure):
    pass


class NoConvergence(MleFailure):
    pass


class WrongArmCount(RepError, ValueError):
    pass


class DegenerateWithinVariance(RepError, ValueError):
    pass


class IncompatibleScheme(RepError, ValueError):
    pass


class InvalidFrame(RepError, ValueError):
    pass


class EmptyArm(RepError, ValueError):
    pass


class ArmTooSmall(RepError, ValueError):
    pass


class MaxDrawsExceeded(RepError, RuntimeError):
    """No acceptable allocation within the draw budget.

    ``attempts`` is the number of candidates tried and ``best_joint_pvalue``
    the largest joint p-value seen (or the smallest marginal one for
    marginal-only schemes), which tells the caller how far to relax.
    """

    def __init__(self, attempts, best_joint_pvalue, message=None):
        self.attempts = attempts
        self.best_joint_pvalue = best_joint_pvalue
        if message is None:
            message = (
                f"no allocation accepted after {attempts} draws "
                f"(best p-value seen: {best_joint_pvalue:.4g}); "
                "consider relaxing the thresholds"
            )
        super().__init__(message)


class AcceptanceTooLow(RepError, RuntimeError):
    pass


class LawSamplingFailure(AcceptanceTooLow):
    pass


class InvalidSpec(RepError, ValueError):
    pass


class MissingPotentials(RepError, ValueError):
    pass


class TooFewAccepted(RepError, ValueError):
    pass
