"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor extents do not line up."""


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


class FormatError(ValueError):
    """Raised when a binary file cannot be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, step, lr, grad_norms):
        self.step = step
        self.lr = lr
        self.grad_norms = dict(grad_norms)
        worst = sorted(self.grad_norms.items(), key=lambda kv: -_nan_last(kv[1]))[:5]
        detail = ", ".join(f"{k}={v:.3g}" for k, v in worst)
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3g}); largest grad norms: {detail}")


def _nan_last(v):
    return float("inf") if v != v else v
