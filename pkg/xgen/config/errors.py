"""
Exception hierarchy for the toolkit.

Everything derives from ValueError so callers that only care about
"bad input" can keep catching that.
"""

from typing import List, Optional, Tuple


class XGenError(ValueError):
    """Base class for every error raised on purpose by xgen"""


class MeshParseError(XGenError):
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(f"{where}{message}")


class UnsupportedFormatError(XGenError):
    pass


class DegenerateGeometryError(XGenError):
    pass


class DegenerateDirectionError(XGenError):
    """Raised when a direction is (numerically) parallel to the surface normal"""


class NonManifoldError(XGenError):
    def __init__(self, edges: List[Tuple[int, int]]):
        self.edges = list(edges)
        shown = ", ".join(f"({a},{b})" for a, b in self.edges[:10])
        more = f" and {len(self.edges) - 10} more" if len(self.edges) > 10 else ""
        super().__init__(f"non-manifold edges: {shown}{more}")


class FormatVersionError(XGenError):
    pass


class TruncatedFileError(XGenError):
    pass


class EmptyShapeError(XGenError):
    pass


class NonFiniteError(XGenError):
    pass


class TrainingDivergedError(XGenError):
    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (diagnostics: {dump_path})")


class ManifestError(XGenError):
    pass
