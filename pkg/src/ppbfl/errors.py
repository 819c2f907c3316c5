"""Exception hierarchy shared by every ppbfl subsystem."""


class PPBFLError(Exception):
    """Base class for all errors raised by this package."""


# dp
class InvalidBudget(PPBFLError, ValueError):
    pass


class EmptyLayer(PPBFLError, ValueError):
    pass


class NonFiniteWeight(PPBFLError, ValueError):
    pass


class InvalidCount(PPBFLError, ValueError):
    pass


class EmptyComposition(PPBFLError, ValueError):
    pass


class ShapeMismatch(PPBFLError, ValueError):
    pass


# tensornet / data
class InvalidSchema(PPBFLError, ValueError):
    pass


class MalformedModel(PPBFLError, ValueError):
    pass


class EmptyDataset(PPBFLError, ValueError):
    pass


class NotIdx(PPBFLError, ValueError):
    pass


class MalformedIdx(PPBFLError, ValueError):
    pass


class CountMismatch(PPBFLError, ValueError):
    pass


class TooManyClients(PPBFLError, ValueError):
    pass


# cas
class NotFound(PPBFLError, KeyError):
    pass


class IntegrityViolation(PPBFLError):
    pass


# ledger
class InvalidTransaction(PPBFLError, ValueError):
    def __init__(self, tx_id: bytes, reason: str = "signature does not verify"):
        super().__init__(f"transaction {tx_id.hex()}: {reason}")
        self.tx_id = tx_id


class MalformedChain(PPBFLError, ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"record {line}: {reason}")
        self.line = line
        self.reason = reason


# ringmix
class RingTooSmall(PPBFLError, ValueError):
    pass


class BadKey(PPBFLError, ValueError):
    pass


class MalformedSignature(PPBFLError, ValueError):
    pass


class NotEnoughObserved(PPBFLError, ValueError):
    pass


class RejectedTx(PPBFLError, ValueError):
    pass


# consensus
class NoEligibleNode(PPBFLError, RuntimeError):
    pass


# orchestrator / cli
class ConfigError(PPBFLError, ValueError):
    pass


class RoundFailed(PPBFLError, RuntimeError):
    def __init__(self, round_no: int, step: str, cause: BaseException):
        super().__init__(f"round {round_no} failed during {step}: {cause}")
        self.round = round_no
        self.step = step
        self.cause = cause
