"""Text-serialization helpers shared by dataset and checkpoint files.

Floats are written with 17 significant digits, which round-trips IEEE
float64 exactly; files therefore reproduce bit-identically.
"""

from __future__ import annotations

from .errors import FormatError


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def parse_float(token: str, where: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise FormatError(f"{where}: expected a float, got {token!r}") from None


def parse_int(token: str, where: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise FormatError(f"{where}: expected an integer, got {token!r}") from None


class LineReader:
    """Iterates lines of a text file, tracking line numbers for diagnostics."""

    def __init__(self, path):
        self.path = str(path)
        with open(path, "r", encoding="utf-8") as fh:
            self._lines = fh.read().splitlines()
        self._pos = 0

    @property
    def line_no(self) -> int:
        return self._pos

    def next(self, what: str) -> str:
        if self._pos >= len(self._lines):
            raise FormatError(
                f"{self.path}: line {self._pos + 1}: unexpected end of file "
                f"while reading {what}"
            )
        line = self._lines[self._pos]
        self._pos += 1
        return line

    def next_kv(self, key: str) -> str:
        """Read a 'key value' line and return the value part."""
        line = self.next(f"'{key}'")
        parts = line.split(maxsplit=1)
        if len(parts) != 2 or parts[0] != key:
            raise FormatError(
                f"{self.path}: line {self._pos}: expected '{key} <value>', "
                f"got {line!r}"
            )
        return parts[1]

    def at_end(self) -> bool:
        return self._pos >= len(self._lines)
