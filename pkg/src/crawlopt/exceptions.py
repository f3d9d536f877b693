"""Exception types raised across the package."""


class CrawlOptError(Exception):
    pass


class InfeasiblePolyhedron(CrawlOptError):
    pass


class PointOutside(CrawlOptError):
    def __init__(self, distance):
        self.distance = float(distance)
        super().__init__(f"point lies outside the polyhedron "
                         f"(distance {self.distance:.3e})")


class NoConvergence(CrawlOptError):
    def __init__(self, gap, periods):
        self.gap = float(gap)
        self.periods = int(periods)
        super().__init__(f"period map did not converge after {periods} "
                         f"periods (gap {gap:.3e})")


class UniquenessViolation(CrawlOptError):
    def __init__(self, subset, value):
        self.subset = tuple(subset)
        self.value = value
        super().__init__(
            f"friction coefficients violate the uniqueness condition for "
            f"J={{{', '.join(str(j + 1) for j in self.subset)}}} "
            f"(signed sum {value:g})")


class DegenerateFriction(CrawlOptError):
    pass


class DimensionMismatch(CrawlOptError):
    pass


class InfeasibleConstraints(CrawlOptError):
    pass


class ReferenceInfeasible(CrawlOptError):
    pass


class LocalityViolated(CrawlOptError):
    def __init__(self, value, bound):
        self.value = float(value)
        self.bound = float(bound)
        super().__init__(f"locality constraint violated: {value:.6g} > "
                         f"{bound:.6g}")


class PeriodTooShort(CrawlOptError):
    pass


class NotOneLink(CrawlOptError):
    pass


class Infeasible(CrawlOptError):
    def __init__(self, residual):
        self.residual = float(residual)
        super().__init__(f"no multiplier set found (residual "
                         f"{self.residual:.3e})")
