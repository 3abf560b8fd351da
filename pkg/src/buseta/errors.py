"""Exception hierarchy shared by all modules."""


class BusEtaError(Exception):
    pass


class NotFound(BusEtaError, LookupError):
    pass


class UnknownNode(NotFound):
    pass


class UnknownRoute(NotFound):
    pass


class UnknownBus(NotFound):
    pass


class UnknownStop(NotFound):
    pass


class AmbiguousStop(BusEtaError):
    def __init__(self, name, candidates):
        super().__init__(f"stop name {name!r} matches nodes {sorted(candidates)}")
        self.candidates = sorted(candidates)


class InvalidRoute(BusEtaError, ValueError):
    pass


class OpenCircuit(InvalidRoute):
    pass


class TraceTooShort(BusEtaError, ValueError):
    pass


class NonMonotoneTimestamps(BusEtaError, ValueError):
    pass


class StaleTimestamp(BusEtaError, ValueError):
    pass


class OffRoute(BusEtaError):
    """Position update that matched no link of the bus's route.

    The update is quarantined rather than applied; this is not fatal.
    """

    def __init__(self, bus_id, position):
        super().__init__(f"bus {bus_id} at {position} matches no link of its route")
        self.bus_id = bus_id
        self.position = position


class InsufficientHistory(BusEtaError):
    pass


class NoActiveBus(BusEtaError):
    pass


class NoCommonRoute(BusEtaError):
    pass


class NoService(BusEtaError):
    pass


class Infeasible(BusEtaError, ValueError):
    pass


class NoData(BusEtaError):
    pass


class CorruptSnapshot(BusEtaError, ValueError):
    pass


class BindFailure(BusEtaError, OSError):
    pass
