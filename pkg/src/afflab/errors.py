"""Exception types shared across afflab.

Every error carries an ``exit_code`` so the CLI can map failures onto the
documented process exit codes (2 = data error, 3 = model error).
"""


class AfflabError(Exception):
    exit_code = 1


class DataError(AfflabError):
    exit_code = 2


class ModelError(AfflabError):
    exit_code = 3


class EmptyDataset(DataError):
    pass


class BinOverfull(DataError):
    pass


class OutOfWorkspace(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class EmptyScene(DataError):
    pass


class EmptyMask(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class CacheMismatch(ModelError):
    pass


class DivergedGradient(ModelError):
    pass


class IncompatibleArchitecture(ModelError):
    pass


class NoValidAction(ModelError):
    pass


class InvalidTarget(ModelError):
    pass


class EmptyBuffer(ModelError):
    pass


class BadIndex(ModelError):
    pass
