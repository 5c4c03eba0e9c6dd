"""Exception hierarchy.

Every domain error derives from :class:`WavePesqError`; the CLI prints the
class name as the error kind.
"""


class WavePesqError(Exception):
    """Base class for all domain errors raised by this package."""

    @property
    def kind(self) -> str:
        return type(self).__name__


class NotFound(WavePesqError, FileNotFoundError):
    pass


class MalformedWav(WavePesqError):
    pass


class UnsupportedFormat(WavePesqError):
    pass


class IoError(WavePesqError, OSError):
    pass


class SilentInput(WavePesqError):
    pass


class NonPowerOfTwoLength(WavePesqError):
    pass


class InputTooShort(WavePesqError):
    pass


class NumericalFailure(WavePesqError):
    pass


class ZeroPowerInput(WavePesqError):
    pass


class EmptyCorpus(WavePesqError):
    pass


class ConfigInvalid(WavePesqError):
    pass


class ShapeMismatch(WavePesqError):
    pass


class RankMismatch(WavePesqError):
    pass


class NotScalar(WavePesqError):
    pass


class SpeakerOutOfRange(WavePesqError):
    pass


class FrameTooShort(WavePesqError):
    pass


class ParseError(WavePesqError):
    pass


class ScoreOutOfRange(WavePesqError):
    pass


class DuplicateKey(WavePesqError):
    pass


class MissingLabel(WavePesqError):
    pass


class UnknownSpeaker(WavePesqError):
    pass


class EmptyDataset(WavePesqError):
    pass


class BadMagic(WavePesqError):
    pass


class VersionUnsupported(WavePesqError):
    pass


class ChecksumMismatch(WavePesqError):
    pass


class DegenerateInput(WavePesqError):
    pass


class DegenerateLabels(DegenerateInput):
    pass
