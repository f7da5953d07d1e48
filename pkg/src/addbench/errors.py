"""Exception hierarchy shared by every stage of the benchmark."""


class AddBenchError(Exception):
    """Base class; the CLI maps it to exit status 1."""


class ConfigError(AddBenchError, ValueError):
    """Bad configuration or arguments; the CLI maps it to exit status 2."""


# corpus
class MissingFile(AddBenchError, FileNotFoundError):
    pass


class DuplicateId(AddBenchError, ValueError):
    def __init__(self, uid):
        super().__init__(f"duplicate utterance id {uid!r}")
        self.id = uid


class BadLabel(AddBenchError, ValueError):
    def __init__(self, row):
        super().__init__(f"label must be 'bonafide' or 'fake': {row!r}")
        self.row = row


class EmptyAudio(AddBenchError, ValueError):
    pass


class UnsupportedRate(AddBenchError, ValueError):
    pass


# codec
class BadSpec(AddBenchError, ValueError):
    pass


class ToolNotFound(AddBenchError):
    pass


class ToolFailed(AddBenchError):
    def __init__(self, cmd, status, output=""):
        super().__init__(f"{cmd!r} exited with status {status}: {output.strip()[-500:]}")
        self.status = status
        self.output = output


class OutputUnreadable(AddBenchError):
    pass


# channel
class BadFrame(AddBenchError, ValueError):
    pass


class BadParams(AddBenchError, ValueError):
    pass


class NoMask(AddBenchError, ValueError):
    pass


# features
class BadGrid(AddBenchError, ValueError):
    pass


class BadLength(AddBenchError, ValueError):
    pass


# detector
class TooFewFrames(AddBenchError, ValueError):
    pass


class KindMismatch(AddBenchError, ValueError):
    pass


class LengthMismatch(AddBenchError, ValueError):
    pass


class ClassMissing(AddBenchError, ValueError):
    pass


class DimMismatch(AddBenchError, ValueError):
    pass


# evaluation
class OneClassOnly(AddBenchError, ValueError):
    pass


class MissingScores(AddBenchError):
    def __init__(self, missing):
        missing = list(missing)
        head = ", ".join(f"{u}/{c}" for u, c in missing[:5])
        super().__init__(f"{len(missing)} (utterance, condition) pairs have no score: {head}")
        self.missing = missing


# datasetgen
class InsufficientData(AddBenchError, ValueError):
    def __init__(self, source, label, have, need):
        super().__init__(f"{source}/{label}: need {need} utterances, have {have}")
        self.source = source
        self.label = label


class EmptyCorpus(AddBenchError, ValueError):
    pass


class TooSmall(AddBenchError, ValueError):
    pass


# cli stages
class StageInputMissing(AddBenchError):
    pass


class StaleCache(AddBenchError):
    pass
