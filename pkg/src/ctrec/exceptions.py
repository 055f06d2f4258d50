"""Exception hierarchy shared by every stage of the pipeline."""


class CtrecError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit code."""


class ParseError(CtrecError, ValueError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class EmptyInputError(CtrecError, ValueError):
    pass


class SplitError(CtrecError, ValueError):
    pass


class MissingItemsError(CtrecError, KeyError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        shown = ", ".join(self.missing[:20])
        more = "" if len(self.missing) <= 20 else f" (+{len(self.missing) - 20} more)"
        super().__init__(f"embedding file lacks {len(self.missing)} item(s): {shown}{more}")

    def __str__(self):
        return self.args[0]


class CalibrationError(CtrecError, ValueError):
    pass


class NumericError(CtrecError, FloatingPointError):
    pass


class ShapeError(CtrecError, ValueError):
    pass


class CheckpointError(CtrecError, OSError):
    pass


class ConfigError(CtrecError, ValueError):
    pass
