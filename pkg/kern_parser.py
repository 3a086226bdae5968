"""
**kern reader.

Recovers pitch, note-value and voicing rows from a Humdrum **kern file and
throws everything else away (barlines, clefs, meters, dynamics, beams,
articulations...). Only the subset of the format the composer corpus uses is
supported; see DESIGN.md for the exact list.
"""

import os
import re
import logging
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path

from errors import KernSyntaxError, UnsupportedFeature, PitchRangeError

logger = logging.getLogger(__name__)

MAX_SPINES = int(os.getenv("KERN_MAX_SPINES", 6))

# Semitone of each letter inside its octave.
LETTER_SEMITONES = {"c": 0, "d": 2, "e": 4, "f": 5, "g": 7, "a": 9, "b": 11}

ACCIDENTALS = {"#": 1, "-": -1, "n": 0}

# MIDI number of C1, the bottom of the pitch axis.
C1_MIDI = 24

# Characters that carry no pitch/duration information in a data token.
IGNORED_CHARS = set(
    "[]_(){}&"      # ties, slurs, phrases, elision
    ";,"            # fermata, breath
    "LJKk"          # beams
    "/\\"           # stem direction
    "'\"~^`:zIvuoOsStTmMwW$R<>|@+=HhU"  # articulations, ornaments, bowing
    "xXyY?N"        # editorial marks
    "pPqQ"          # grace / appoggiatura
)

GRACE_CHARS = set("qQ")

_PITCH_RE = re.compile(r"^([a-gA-G])\1*[#\-n]*$")
_DURATION_RE = re.compile(r"^(\d+)(?:%(\d+))?(\.*)$")
_SUBTOKEN_RE = re.compile(r"^(?P<dur>\d+(?:%\d+)?)?(?P<body>(?:[a-gA-G]+[#\-n]*)?r+|[a-gA-G]+[#\-n]*)?$")


class CellKind(str, Enum):
    CONTINUATION = "continuation"
    REST = "rest"
    NOTES = "notes"
    # Column not active on this line (before a *^ split or after a *v join).
    EMPTY = "empty"


@dataclass(frozen=True)
class SpineCell:
    kind: CellKind
    duration: Fraction | None = None
    pitches: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind == CellKind.NOTES:
            if not self.pitches or self.duration is None:
                raise ValueError("note cell needs pitches and a duration")
        elif self.kind == CellKind.REST:
            if self.duration is None or self.pitches:
                raise ValueError("rest cell needs a duration and no pitches")
        elif self.duration is not None or self.pitches:
            raise ValueError(f"{self.kind.value} cell carries no duration or pitches")
        if any(p < 0 for p in self.pitches):
            raise ValueError("pitch indices must be >= 0")


CONTINUATION = SpineCell(CellKind.CONTINUATION)
EMPTY = SpineCell(CellKind.EMPTY)


@dataclass(frozen=True)
class DataRow:
    cells: tuple[SpineCell, ...]
    line: int = 0


@dataclass(frozen=True)
class ParsedScore:
    rows: tuple[DataRow, ...]
    spine_count: int
    source_path: str = ""

    def __post_init__(self):
        if self.spine_count < 1:
            raise ValueError("spine_count must be >= 1")
        for row in self.rows:
            if len(row.cells) != self.spine_count:
                raise ValueError(f"row at line {row.line} has {len(row.cells)} cells, expected {self.spine_count}")

    @property
    def T(self) -> int:
        return len(self.rows)

    def pitches(self):
        for row in self.rows:
            for cell in row.cells:
                yield from cell.pitches

    def durations(self):
        for row in self.rows:
            for cell in row.cells:
                if cell.duration is not None:
                    yield cell.duration


# ---------- token level ----------

def pitch_to_semitone(token: str) -> int:
    """
    Convert a **kern pitch ("a", "ff#", "BB-") to semitones above C1.

    Lowercase c is middle C (C4); every repeat of a lowercase letter raises an
    octave, uppercase C is C3 and every repeat lowers an octave.
    """
    if not token or not _PITCH_RE.match(token):
        raise KernSyntaxError(f"malformed pitch token {token!r}")

    letter = token[0]
    repeats = len(token) - len(token.lstrip(letter))
    accidentals = token[repeats:]

    if letter.islower():
        octave = 4 + (repeats - 1)
    else:
        octave = 3 - (repeats - 1)

    midi = 12 * (octave + 1) + LETTER_SEMITONES[letter.lower()]
    midi += sum(ACCIDENTALS[a] for a in accidentals)

    semitones = midi - C1_MIDI
    if semitones < 0:
        raise PitchRangeError(f"pitch {token!r} lies below C1")
    return semitones


def parse_duration(token: str) -> Fraction:
    """
    Convert a **kern reciprocal duration ("8", "2..", "0", "3%2") to a
    fraction of a whole note.
    """
    m = _DURATION_RE.match(token or "")
    if not m:
        raise KernSyntaxError(f"malformed duration token {token!r}")

    digits, tuplet, dots = m.groups()
    if set(digits) == {"0"}:
        # 0 = breve, 00 = long, 000 = maxima
        base = Fraction(2 ** len(digits))
    elif tuplet is not None:
        if int(tuplet) == 0 or int(digits) == 0:
            raise KernSyntaxError(f"malformed duration token {token!r}")
        base = Fraction(int(tuplet), int(digits))
    else:
        base = Fraction(1, int(digits))

    # Each dot adds half of the previous increment.
    return base * (2 - Fraction(1, 2 ** len(dots)))


def _parse_subtoken(raw: str, line: int | None, column: int | None) -> SpineCell | None:
    """Parse one note/rest of a cell. Returns None for dropped grace notes."""
    is_grace = any(ch in GRACE_CHARS for ch in raw)
    dots = raw.count(".")
    cleaned = "".join(ch for ch in raw if ch not in IGNORED_CHARS and ch != ".")

    m = _SUBTOKEN_RE.match(cleaned)
    if not m or not m.group("body"):
        if is_grace and not any(ch.isdigit() for ch in cleaned):
            return None
        raise KernSyntaxError(f"unparseable token {raw!r}", line=line, column=column)

    if m.group("dur") is None:
        if is_grace:
            return None
        raise KernSyntaxError(f"token {raw!r} has no duration", line=line, column=column)

    try:
        duration = parse_duration(m.group("dur") + "." * dots)
    except KernSyntaxError as e:
        raise KernSyntaxError(str(e), line=line, column=column) from e

    body = m.group("body")
    # A rest may carry a display pitch (4ddr); the letters are dropped.
    if body.endswith("r"):
        return SpineCell(CellKind.REST, duration=duration)

    try:
        pitch = pitch_to_semitone(body)
    except KernSyntaxError as e:
        raise KernSyntaxError(str(e), line=line, column=column) from e
    return SpineCell(CellKind.NOTES, duration=duration, pitches=(pitch,))


def parse_cell(token: str, line: int | None = None, column: int | None = None) -> SpineCell:
    """Parse one spine cell: '.', a rest, a note or a space-separated chord."""
    token = token.strip()
    if token == "." or token == "":
        return CONTINUATION

    parts = [_parse_subtoken(sub, line, column) for sub in token.split(" ") if sub and sub != "."]
    parts = [p for p in parts if p is not None]
    if not parts:
        # Only grace notes here; nothing sounds on this line.
        return CONTINUATION

    notes = [p for p in parts if p.kind == CellKind.NOTES]
    if not notes:
        return parts[0]

    # Chord members normally share a duration; keep the first one's.
    pitches = tuple(sorted({p for n in notes for p in n.pitches}))
    return SpineCell(CellKind.NOTES, duration=notes[0].duration, pitches=pitches)


# ---------- spine bookkeeping ----------

@dataclass
class _SpineLayout:
    """Tracks which tab column is which spine, and whether it is a **kern spine."""
    is_kern: list[bool] = field(default_factory=list)

    @property
    def width(self) -> int:
        return len(self.is_kern)

    def apply(self, tokens: list[str], line: int):
        if len(tokens) != self.width:
            raise KernSyntaxError(
                f"interpretation line has {len(tokens)} tokens, expected {self.width}", line=line
            )

        out: list[bool] = []
        i = 0
        while i < len(tokens):
            tok = tokens[i]
            kern = self.is_kern[i]
            if tok == "*^":
                out.extend([kern, kern])
            elif tok == "*v":
                j = i
                while j < len(tokens) and tokens[j] == "*v":
                    j += 1
                if j - i < 2:
                    raise UnsupportedFeature(f"line {line}: lone *v at column {i + 1} cannot be resolved")
                out.append(kern)
                i = j
                continue
            elif tok == "*x":
                if i + 1 >= len(tokens) or tokens[i + 1] != "*x":
                    raise UnsupportedFeature(f"line {line}: unpaired *x at column {i + 1}")
                out.extend([self.is_kern[i + 1], kern])
                i += 2
                continue
            elif tok == "*+":
                out.extend([kern, False])
            elif tok == "*-":
                pass
            elif tok.startswith("**"):
                out.append(tok == "**kern")
            else:
                out.append(kern)
            i += 1

        self.is_kern = out

    def kern_columns(self) -> list[int]:
        return [i for i, k in enumerate(self.is_kern) if k]


def parse_score(text: str, source_path: str = "", max_spines: int | None = None) -> ParsedScore:
    """
    Parse **kern text into rows of note/rest/continuation cells.

    Barlines, interpretations and comments produce no rows; neither do data
    lines that only continue earlier events. Spine splits widen the row,
    columns that are not active on a line are padded with EMPTY cells.
    """
    max_spines = MAX_SPINES if max_spines is None else max_spines
    layout: _SpineLayout | None = None
    raw_rows: list[tuple[int, list[SpineCell]]] = []
    widest = 0

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.rstrip("\r\n")
        if not line.strip():
            continue
        tokens = line.split("\t")
        first = tokens[0]

        if first.startswith("!"):
            continue

        if first.startswith("*"):
            if layout is None:
                if not first.startswith("**"):
                    raise KernSyntaxError("interpretation before exclusive interpretation", line=lineno)
                layout = _SpineLayout(is_kern=[t == "**kern" for t in tokens])
                if not any(layout.is_kern):
                    raise UnsupportedFeature(f"{source_path or 'score'}: no **kern spine")
                continue
            layout.apply(tokens, lineno)
            continue

        if layout is None:
            # Headerless fragment: every column is **kern.
            layout = _SpineLayout(is_kern=[True] * len(tokens))

        if len(tokens) != layout.width:
            raise KernSyntaxError(
                f"data line has {len(tokens)} spines, expected {layout.width}",
                line=lineno, column=min(len(tokens), layout.width) + 1, path=source_path or None,
            )

        if first.startswith("="):
            continue

        kern_cols = layout.kern_columns()
        if len(kern_cols) > max_spines:
            raise UnsupportedFeature(
                f"{source_path or 'score'} line {lineno}: {len(kern_cols)} **kern spines exceed the maximum of {max_spines}"
            )

        try:
            cells = [parse_cell(tokens[c], lineno, c + 1) for c in kern_cols]
        except KernSyntaxError as e:
            e.path = e.path or (source_path or None)
            raise

        if not any(c.kind in (CellKind.NOTES, CellKind.REST) for c in cells):
            continue

        widest = max(widest, len(cells))
        raw_rows.append((lineno, cells))

    spine_count = max(widest, 1)
    rows = tuple(
        DataRow(cells=tuple(cells + [EMPTY] * (spine_count - len(cells))), line=lineno)
        for lineno, cells in raw_rows
    )
    return ParsedScore(rows=rows, spine_count=spine_count, source_path=source_path)


def parse_file(path, max_spines: int | None = None) -> ParsedScore:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        # A handful of KernScores files are Latin-1 encoded.
        logger.warning(f"⚠️ {path} is not UTF-8, reading as latin-1")
        text = path.read_text(encoding="latin-1")
    return parse_score(text, source_path=str(path), max_spines=max_spines)
