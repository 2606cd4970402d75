"""Exception hierarchy.

Every error raised by the pipeline derives from :class:`ElectricSightError`.
Stage errors carry an optional ``stage`` tag so a partial report can say
where a measurement broke down.
"""


class ElectricSightError(Exception):
    stage = None

    def __init__(self, message="", stage=None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class GeometryError(ElectricSightError, ValueError):
    pass


class BehindCamera(GeometryError):
    pass


class ParallelRay(GeometryError):
    pass


class IntersectionBehind(GeometryError):
    pass


class EmptyPolyline(GeometryError):
    pass


class DegenerateInput(GeometryError):
    pass


class EmptyCloud(ElectricSightError, ValueError):
    pass


class InsufficientCorrespondences(ElectricSightError, ValueError):
    pass


class DegenerateConfiguration(ElectricSightError, ValueError):
    pass


class NonFiniteCost(ElectricSightError, ArithmeticError):
    pass


class WrongClass(ElectricSightError, ValueError):
    pass


class DegenerateBox(ElectricSightError, ValueError):
    pass


class EmptyMask(ElectricSightError, ValueError):
    pass


class NoCorrespondence(ElectricSightError, LookupError):
    pass


class DegenerateGroundPoints(GeometryError):
    pass


class ParallelToNormal(GeometryError):
    pass


class AboveHorizon(ElectricSightError, ValueError):
    pass


class SingularDenominator(ElectricSightError, ZeroDivisionError):
    pass


class InvalidSpec(ElectricSightError, ValueError):
    pass


class EmptySamples(ElectricSightError, ValueError):
    pass


class SchemaError(ElectricSightError, ValueError):
    """Scene or config file does not match the schema.

    ``field`` holds a dotted path to the offending entry, e.g.
    ``point_cloud.path`` or ``detections[2].box``.
    """

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
