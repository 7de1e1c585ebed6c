"""Exception taxonomy.

NumericalError subclasses signal a failed numerical run (CLI exit code 3);
ContractError subclasses signal violated preconditions or unusable inputs.
Config problems live in ConfigError (exit code 2). Check *outcomes* (a DPP
residual over tolerance, an audit violation) are ordinary return values, not
exceptions.
"""


class RclabError(Exception):
    pass


class ConfigError(RclabError):
    """Bad scenario file or option set. Collects all schema messages."""

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class ContractError(RclabError):
    pass


class NumericalError(RclabError):
    pass


# -- contract violations -------------------------------------------------

class InvalidControl(ContractError):
    pass


class DegenerateComparison(ContractError):
    pass


class ZNotSupported(ContractError):
    pass


class UnsupportedRegime(ContractError):
    pass


class OutOfModel(ContractError):
    pass


class DomainViolation(ContractError):
    pass


class PremiseViolated(ContractError):
    pass


class BudgetExceeded(ContractError):
    pass


class ConditionAuditFailed(ContractError):
    def __init__(self, condition, detail=""):
        self.condition = condition
        super().__init__(f"condition {condition} violated on audit sample"
                         + (f": {detail}" if detail else ""))


class TimeStepTooLarge(ContractError):
    pass


# -- numerical failures ---------------------------------------------------

class DivergedPath(NumericalError):
    def __init__(self, step_index, detail=""):
        self.step_index = step_index
        super().__init__(f"non-finite state at step {step_index}"
                         + (f": {detail}" if detail else ""))


class UnstableMoment(NumericalError):
    pass


class EvaluationError(NumericalError):
    def __init__(self, message, point=None):
        self.point = point
        super().__init__(message if point is None
                         else f"{message} at {point}")


class RootBracketFailure(NumericalError):
    pass


class RegressionError(NumericalError):
    def __init__(self, step_index, detail=""):
        self.step_index = step_index
        super().__init__(f"regression failed at step {step_index}"
                         + (f": {detail}" if detail else ""))


class SchemeNotMonotone(NumericalError):
    pass


class Diverged(NumericalError):
    pass


class ReachabilityError(NumericalError):
    pass
