"""Exception types raised across the simulator."""


class InvalidArgument(ValueError):
    pass


class DegenerateDiversity(ArithmeticError):
    """The weighted mean gradient is (numerically) zero, so the diversity ratio is undefined.

    ``numerator`` carries the weighted sum of squared local gradient norms at the
    offending point.
    """

    def __init__(self, numerator: float, denominator: float):
        self.numerator = numerator
        self.denominator = denominator
        super().__init__(
            f"mean gradient squared norm {denominator:.3e} below floor "
            f"(numerator {numerator:.3e}); point is near a global stationary point"
        )


class InvalidMixing(ValueError):
    pass


class DisconnectedTopology(InvalidMixing):
    pass


class NumericalDivergence(ArithmeticError):
    def __init__(self, t: int, j: int | None, reason: str = "non-finite value"):
        self.t = t
        self.j = j
        super().__init__(f"divergence at iteration {t}, device {j}: {reason}")


class RateFitUnavailable(ValueError):
    pass
