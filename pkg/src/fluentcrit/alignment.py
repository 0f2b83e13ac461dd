"""TextGrid parsing and the frame -> phoneme -> word alignment hierarchy.

Only the long ("ooTextFile") TextGrid dialect with interval tiers is
supported, which is what the Montreal Forced Aligner emits.  Frames are
assigned to intervals by rounding each interval boundary time to the
nearest frame start (``round(t * sr / hop)``); a frame starting exactly on
a boundary belongs to the later interval.  The final boundary is stretched
or shrunk by at most one frame to meet the spectrogram's frame budget.
"""

from __future__ import annotations

import math
import re
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigMismatch, DegenerateAlignment, FormatError, ParseError
from .spectral import MelConfig

SILENCE = -1
SILENCE_LABELS = frozenset({"", "sil", "sp", "spn"})

_KV_RE = re.compile(r'^\s*([\w?: ]+?)\s*=\s*(.*?)\s*$')
_ITEM_RE = re.compile(r'^\s*(item|intervals|points)\s*\[\s*(\d*)\s*\]\s*:\s*$')


@dataclass(frozen=True)
class Interval:
    xmin: float
    xmax: float
    label: str


@dataclass(frozen=True)
class IntervalTier:
    name: str
    xmin: float
    xmax: float
    intervals: tuple[Interval, ...]


@dataclass(frozen=True)
class TextGridDoc:
    xmin: float
    xmax: float
    tiers: tuple[IntervalTier, ...]

    def tier(self, name: str) -> IntervalTier:
        for t in self.tiers:
            if t.name == name:
                return t
        raise KeyError(name)


class _Lines:
    """Line cursor that remembers 1-based line numbers for error messages."""

    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self) -> tuple[int, str]:
        while self.pos < len(self.lines):
            line = self.lines[self.pos]
            self.pos += 1
            if line.strip():
                return self.pos, line
        raise ParseError("unexpected end of file", line=len(self.lines))

    def expect_kv(self, key: str) -> tuple[int, str]:
        lineno, line = self.next()
        m = _KV_RE.match(line)
        if not m or m.group(1) != key:
            raise ParseError(f"expected '{key} = ...', got {line.strip()!r}", line=lineno)
        return lineno, m.group(2)

    def expect_item(self, kind: str) -> tuple[int, str]:
        lineno, line = self.next()
        m = _ITEM_RE.match(line)
        if not m or m.group(1) != kind:
            raise ParseError(f"expected '{kind} [...]:', got {line.strip()!r}", line=lineno)
        return lineno, m.group(2)


def _unquote(value: str, lineno: int) -> str:
    value = value.strip()
    if len(value) < 2 or value[0] != '"' or value[-1] != '"':
        raise ParseError(f"expected a quoted string, got {value!r}", line=lineno)
    return value[1:-1].replace('""', '"')


def _number(value: str, lineno: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise ParseError(f"expected a number, got {value!r}", line=lineno) from None


def parse_textgrid(text, required_tiers=("words", "phones")) -> TextGridDoc:
    """Parse a long-format TextGrid (string or text stream).

    Interval tiers must be sorted, non-overlapping and gap-free; the tiers
    named in ``required_tiers`` must be present.  Any violation raises
    ParseError with the offending line number.
    """
    if hasattr(text, "read"):
        text = text.read()
    cur = _Lines(text)

    lineno, ftype = cur.expect_kv("File type")
    if _unquote(ftype, lineno) != "ooTextFile":
        raise ParseError(f"not an ooTextFile TextGrid: {ftype}", line=lineno)
    lineno, oclass = cur.expect_kv("Object class")
    if _unquote(oclass, lineno) != "TextGrid":
        raise ParseError(f"not a TextGrid object: {oclass}", line=lineno)

    lineno, v = cur.expect_kv("xmin")
    doc_xmin = _number(v, lineno)
    lineno, v = cur.expect_kv("xmax")
    doc_xmax = _number(v, lineno)
    if doc_xmax <= doc_xmin:
        raise ParseError(f"document xmax {doc_xmax} <= xmin {doc_xmin}", line=lineno)

    lineno, line = cur.next()  # "tiers? <exists>"
    if not line.strip().startswith("tiers?"):
        raise ParseError(f"expected 'tiers? <exists>', got {line.strip()!r}", line=lineno)
    lineno, v = cur.expect_kv("size")
    n_tiers = int(_number(v, lineno))
    cur.expect_item("item")  # the bare "item []:" header

    tiers = []
    for _ in range(n_tiers):
        cur.expect_item("item")
        lineno, v = cur.expect_kv("class")
        tier_class = _unquote(v, lineno)
        if tier_class != "IntervalTier":
            raise ParseError(f"unsupported tier class {tier_class!r}", line=lineno)
        lineno, v = cur.expect_kv("name")
        name = _unquote(v, lineno)
        lineno, v = cur.expect_kv("xmin")
        t_xmin = _number(v, lineno)
        lineno, v = cur.expect_kv("xmax")
        t_xmax = _number(v, lineno)
        if not (doc_xmin <= t_xmin < t_xmax <= doc_xmax):
            raise ParseError(
                f"tier {name!r} span [{t_xmin}, {t_xmax}] outside document span",
                line=lineno,
            )
        lineno, v = cur.expect_kv("intervals: size")
        n_intervals = int(_number(v, lineno))
        if n_intervals < 1:
            raise ParseError(f"tier {name!r} has no intervals", line=lineno)

        intervals = []
        for _ in range(n_intervals):
            cur.expect_item("intervals")
            lineno, v = cur.expect_kv("xmin")
            i_xmin = _number(v, lineno)
            lineno, v = cur.expect_kv("xmax")
            i_xmax = _number(v, lineno)
            lineno, v = cur.expect_kv("text")
            label = _unquote(v, lineno)
            if i_xmax <= i_xmin:
                raise ParseError(
                    f"tier {name!r}: interval xmax {i_xmax} <= xmin {i_xmin}", line=lineno
                )
            if intervals:
                prev = intervals[-1]
                if i_xmin < prev.xmax:
                    raise ParseError(
                        f"tier {name!r}: overlapping or unsorted intervals at {i_xmin}",
                        line=lineno,
                    )
                if i_xmin > prev.xmax:
                    raise ParseError(
                        f"tier {name!r}: gap between {prev.xmax} and {i_xmin}", line=lineno
                    )
            elif i_xmin != t_xmin:
                raise ParseError(
                    f"tier {name!r}: first interval starts at {i_xmin}, tier at {t_xmin}",
                    line=lineno,
                )
            intervals.append(Interval(i_xmin, i_xmax, label))
        if intervals[-1].xmax != t_xmax:
            raise ParseError(
                f"tier {name!r}: last interval ends at {intervals[-1].xmax}, tier at {t_xmax}",
                line=lineno,
            )
        tiers.append(IntervalTier(name, t_xmin, t_xmax, tuple(intervals)))

    names = {t.name for t in tiers}
    for req in required_tiers:
        if req not in names:
            raise ParseError(f"required tier {req!r} missing", line=len(cur.lines))
    return TextGridDoc(doc_xmin, doc_xmax, tuple(tiers))


def serialize_textgrid(doc: TextGridDoc) -> str:
    """Render a TextGridDoc back to long-format text (parse round-trips)."""
    def esc(s: str) -> str:
        return s.replace('"', '""')

    out = [
        'File type = "ooTextFile"',
        'Object class = "TextGrid"',
        "",
        f"xmin = {doc.xmin!r}",
        f"xmax = {doc.xmax!r}",
        "tiers? <exists>",
        f"size = {len(doc.tiers)}",
        "item []:",
    ]
    for ti, tier in enumerate(doc.tiers, start=1):
        out += [
            f"    item [{ti}]:",
            '        class = "IntervalTier"',
            f'        name = "{esc(tier.name)}"',
            f"        xmin = {tier.xmin!r}",
            f"        xmax = {tier.xmax!r}",
            f"        intervals: size = {len(tier.intervals)}",
        ]
        for ii, iv in enumerate(tier.intervals, start=1):
            out += [
                f"        intervals [{ii}]:",
                f"            xmin = {iv.xmin!r}",
                f"            xmax = {iv.xmax!r}",
                f'            text = "{esc(iv.label)}"',
            ]
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class AlignmentTable:
    """Per-frame phoneme and word indices plus unit durations.

    Index SILENCE (-1) marks frames belonging to no retained unit.  Unit
    frame runs are contiguous; word durations aggregate the durations of
    the word's phonemes.
    """

    words: tuple[str, ...]
    phonemes: tuple[str, ...]
    frame_to_phoneme: np.ndarray
    frame_to_word: np.ndarray
    phoneme_durations: np.ndarray
    word_durations: np.ndarray
    phoneme_to_word: np.ndarray
    word_starts: np.ndarray = field(init=False)
    word_ends: np.ndarray = field(init=False)
    phoneme_starts: np.ndarray = field(init=False)
    phoneme_ends: np.ndarray = field(init=False)

    def __post_init__(self):
        for name in ("frame_to_phoneme", "frame_to_word", "phoneme_durations",
                     "word_durations", "phoneme_to_word"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if self.frame_to_phoneme.shape != self.frame_to_word.shape:
            raise ValueError("frame maps must have equal length")
        starts, ends = _unit_bounds(self.frame_to_phoneme, len(self.phonemes), "phoneme")
        object.__setattr__(self, "phoneme_starts", starts)
        object.__setattr__(self, "phoneme_ends", ends)
        starts, ends = _unit_bounds(self.frame_to_word, len(self.words), "word")
        object.__setattr__(self, "word_starts", starts)
        object.__setattr__(self, "word_ends", ends)

        if not np.array_equal(self.phoneme_durations, self.phoneme_ends - self.phoneme_starts):
            raise ValueError("phoneme_durations disagree with frame_to_phoneme")
        agg = np.zeros(len(self.words), dtype=np.int64)
        np.add.at(agg, self.phoneme_to_word, self.phoneme_durations)
        if not np.array_equal(self.word_durations, agg):
            raise ValueError("word_durations must aggregate phoneme durations")
        non_silent = self.frame_to_phoneme >= 0
        if not np.array_equal(
            self.frame_to_word[non_silent],
            self.phoneme_to_word[self.frame_to_phoneme[non_silent]],
        ):
            raise ValueError("frame word indices inconsistent with phoneme_to_word")
        if (self.frame_to_word >= 0).sum() != non_silent.sum():
            raise ValueError("word frames must coincide with non-silent phoneme frames")

    @property
    def n_frames(self) -> int:
        return len(self.frame_to_phoneme)

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def n_phonemes(self) -> int:
        return len(self.phonemes)

    @property
    def non_silent_frames(self) -> int:
        return int(self.phoneme_durations.sum())


def _unit_bounds(frame_map: np.ndarray, n_units: int, what: str):
    """First/one-past-last frame of each unit; units must be contiguous runs."""
    starts = np.full(n_units, -1, dtype=np.int64)
    ends = np.full(n_units, -1, dtype=np.int64)
    prev = -1
    for f, u in enumerate(frame_map):
        u = int(u)
        if u == SILENCE:
            continue
        if not 0 <= u < n_units:
            raise ValueError(f"{what} index {u} out of range")
        if starts[u] == -1:
            if u < prev:
                raise ValueError(f"{what} indices not monotone at frame {f}")
            starts[u] = f
            prev = u
        elif u != prev or ends[u] != -1 and ends[u] != f:
            raise ValueError(f"{what} {u} frames are not contiguous")
        ends[u] = f + 1
        prev = u
    if (starts < 0).any():
        missing = int(np.flatnonzero(starts < 0)[0])
        raise ValueError(f"{what} {missing} received zero frames")
    return starts, ends


def _boundary_frame(t: float, cfg: MelConfig) -> int:
    return int(math.floor(t * cfg.frames_per_second + 0.5))


def build_alignment(
    doc: TextGridDoc,
    n_frames: int,
    cfg: MelConfig,
    words_tier: str = "words",
    phones_tier: str = "phones",
    silence_labels=SILENCE_LABELS,
) -> AlignmentTable:
    """Map every spectrogram frame to its phoneme and word.

    Boundary times round to frame indices at ``sr/hop`` frames per second
    (a frame starting exactly on a boundary joins the later interval); the
    utterance-final boundary is forced to ``n_frames``, which may move it
    by at most one frame.  Intervals labelled with any of
    ``silence_labels`` become SILENCE; every other interval must receive at
    least one frame.
    """
    try:
        phones = doc.tier(phones_tier)
        words = doc.tier(words_tier)
    except KeyError as exc:
        raise ConfigMismatch(f"document has no tier named {exc.args[0]!r}") from exc

    expected_end = _boundary_frame(doc.xmax, cfg)
    if abs(n_frames - expected_end) > 1:
        raise ConfigMismatch(
            f"{n_frames} frames but document spans {doc.xmax} s "
            f"(~{expected_end} frames at {cfg.frames_per_second:.2f} frames/s)"
        )

    bounds = [_boundary_frame(iv.xmin, cfg) for iv in phones.intervals]
    bounds.append(_boundary_frame(phones.intervals[-1].xmax, cfg))
    bounds = [min(max(b, 0), n_frames) for b in bounds]
    bounds[-1] = n_frames

    frame_to_phoneme = np.full(n_frames, SILENCE, dtype=np.int64)
    phonemes: list[str] = []
    phoneme_durations: list[int] = []
    phone_mids: list[float] = []
    for iv, start, end in zip(phones.intervals, bounds[:-1], bounds[1:]):
        if iv.label in silence_labels:
            continue
        if end <= start:
            raise DegenerateAlignment(
                f"phoneme {iv.label!r} at [{iv.xmin}, {iv.xmax}] receives zero frames"
            )
        frame_to_phoneme[start:end] = len(phonemes)
        phonemes.append(iv.label)
        phoneme_durations.append(end - start)
        phone_mids.append((iv.xmin + iv.xmax) / 2.0)

    word_labels: list[str] = []
    word_index_of_interval: dict[int, int] = {}
    for k, iv in enumerate(words.intervals):
        if iv.label not in silence_labels:
            word_index_of_interval[k] = len(word_labels)
            word_labels.append(iv.label)

    word_edges = [iv.xmin for iv in words.intervals]
    phoneme_to_word = np.empty(len(phonemes), dtype=np.int64)
    for p, mid in enumerate(phone_mids):
        k = bisect_right(word_edges, mid) - 1
        if k < 0 or k not in word_index_of_interval:
            raise DegenerateAlignment(
                f"phoneme {phonemes[p]!r} lies in no word (midpoint {mid:.4f} s)"
            )
        phoneme_to_word[p] = word_index_of_interval[k]

    word_durations = np.zeros(len(word_labels), dtype=np.int64)
    np.add.at(word_durations, phoneme_to_word, np.asarray(phoneme_durations, dtype=np.int64))
    if (word_durations == 0).any():
        w = int(np.flatnonzero(word_durations == 0)[0])
        raise DegenerateAlignment(f"word {word_labels[w]!r} receives zero frames")

    frame_to_word = np.full(n_frames, SILENCE, dtype=np.int64)
    mask = frame_to_phoneme >= 0
    frame_to_word[mask] = phoneme_to_word[frame_to_phoneme[mask]]

    return AlignmentTable(
        words=tuple(word_labels),
        phonemes=tuple(phonemes),
        frame_to_phoneme=frame_to_phoneme,
        frame_to_word=frame_to_word,
        phoneme_durations=np.asarray(phoneme_durations, dtype=np.int64),
        word_durations=word_durations,
        phoneme_to_word=phoneme_to_word,
    )


def word_span_frames(table: AlignmentTable, first_word: int, last_word: int) -> tuple[int, int]:
    """Half-open frame interval covering words ``first_word..last_word``.

    Silence between the covered words is included; silence before the first
    and after the last word is not.
    """
    if not (0 <= first_word <= last_word < table.n_words):
        raise IndexError(
            f"word range [{first_word}, {last_word}] out of bounds for "
            f"{table.n_words} words"
        )
    return int(table.word_starts[first_word]), int(table.word_ends[last_word])


def table_to_json(table: AlignmentTable) -> dict:
    """Documented JSON schema for an alignment table."""
    return {
        "words": list(table.words),
        "phonemes": list(table.phonemes),
        "frame_to_phoneme": table.frame_to_phoneme.tolist(),
        "frame_to_word": table.frame_to_word.tolist(),
        "durations": {
            "phoneme": table.phoneme_durations.tolist(),
            "word": table.word_durations.tolist(),
        },
    }


def table_from_json(obj) -> AlignmentTable:
    """Rebuild an AlignmentTable from its JSON form, validating invariants."""
    try:
        words = tuple(str(w) for w in obj["words"])
        phonemes = tuple(str(p) for p in obj["phonemes"])
        f2p = np.asarray(obj["frame_to_phoneme"], dtype=np.int64)
        f2w = np.asarray(obj["frame_to_word"], dtype=np.int64)
        pdur = np.asarray(obj["durations"]["phoneme"], dtype=np.int64)
        wdur = np.asarray(obj["durations"]["word"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed alignment JSON: {exc}") from exc

    phoneme_to_word = np.empty(len(phonemes), dtype=np.int64)
    for p in range(len(phonemes)):
        frames = np.flatnonzero(f2p == p)
        if frames.size == 0:
            raise FormatError(f"malformed alignment JSON: phoneme {p} has no frames")
        phoneme_to_word[p] = f2w[frames[0]]
    try:
        return AlignmentTable(
            words=words,
            phonemes=phonemes,
            frame_to_phoneme=f2p,
            frame_to_word=f2w,
            phoneme_durations=pdur,
            word_durations=wdur,
            phoneme_to_word=phoneme_to_word,
        )
    except ValueError as exc:
        raise FormatError(f"malformed alignment JSON: {exc}") from exc
