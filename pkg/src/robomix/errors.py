"""Exception hierarchy shared by all robomix modules."""


class RobomixError(Exception):
    """Base class for every error raised by this package."""


class EpisodeIOError(RobomixError, OSError):
    """A file required by an episode pack is missing or unreadable."""


class FormatError(RobomixError, ValueError):
    """Payload on disk (or in memory) disagrees with its declared shape."""


class InsufficientData(RobomixError, ValueError):
    pass


class FrameTooSmall(RobomixError, ValueError):
    pass


class Undecidable(RobomixError, ValueError):
    """A gripper channel never crossed either hysteresis threshold."""


class DomainError(RobomixError, ValueError):
    pass


class RangeError(RobomixError, ValueError):
    pass


class DimError(RobomixError, ValueError):
    pass


class DescriptorError(RobomixError, ValueError):
    pass


class LayoutError(RobomixError, ValueError):
    pass


class MaskError(RobomixError, ValueError):
    pass


class RetargetError(RobomixError, ValueError):
    def __init__(self, message, semantic_ids=()):
        super().__init__(message)
        self.semantic_ids = list(semantic_ids)


class NotReversible(RobomixError, ValueError):
    pass


class CriticError(RobomixError, ValueError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(RobomixError, ValueError):
    """A config file failed to parse; the message names file and field."""
