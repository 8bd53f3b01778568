"""Typed errors shared across the toolkit.

Every error carries a machine-readable ``code`` so the CLI can serialize
failures into the report; ``context`` holds small JSON-safe details such
as the offending node or parameter values.
"""


class DecDeformError(Exception):
    code = "error"

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context

    def to_dict(self):
        return {"code": self.code, "message": str(self), "context": self.context}


class DomainExceedsGrid(DecDeformError):
    code = "domain-exceeds-grid"


class SingularMetric(DecDeformError):
    code = "singular-metric"


class IndefinitePerturbedMetric(DecDeformError):
    code = "indefinite-perturbed-metric"


class UnsupportedSpace(DecDeformError):
    code = "unsupported-space"


class GramSingular(DecDeformError):
    code = "gram-singular"


class CgStagnation(DecDeformError):
    code = "cg-stagnation"


class Divergence(DecDeformError):
    code = "divergence"


class MaxIterations(DecDeformError):
    code = "max-iter"


class HTooLarge(DecDeformError):
    code = "h-too-large"


class DecViolation(DecDeformError):
    code = "dec-violation"


class SphereOutsideGrid(DecDeformError):
    code = "sphere-outside-grid"


class OutOfRangeSampling(DecDeformError):
    code = "out-of-range-sampling"


class SingularityInDomain(DecDeformError):
    code = "singularity-in-domain"


class LeftParameterSet(DecDeformError):
    code = "left-parameter-set"


class NoConvergence(DecDeformError):
    code = "no-convergence"


class EpsilonTooSmall(DecDeformError):
    code = "epsilon-too-small"


class ConfigInvalid(DecDeformError):
    code = "config-invalid"
