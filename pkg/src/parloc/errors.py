"""Exception types shared across the package.

The CLI maps each class to a distinct exit code, so errors raised anywhere
in the pipeline surface with a stable, scriptable meaning.
"""


class ParseError(ValueError):
    """A text input file could not be parsed.

    Carries ``path`` and ``line`` so messages point at the offending line.
    """

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class IntegrityError(ValueError):
    """Referential or structural inconsistency in a map database."""


class DegenerateGeometryError(ValueError):
    """Input geometry admits no pose solution (collinear or coincident points)."""


class PatchOutOfBoundsError(ValueError):
    """The requested keypoint patch does not lie fully inside the image."""
