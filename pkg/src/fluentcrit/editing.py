"""Run-time edit mechanics: word diff, splicing, and the edit pipeline.

Edits are located by a longest-common-subsequence diff over word lists;
each maximal run of changed words becomes one insertion, replacement or
deletion.  Splicing replaces a frame region of the original spectrogram
with predicted frames (which may have any length), so context frames stay
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import AlignmentTable, word_span_frames
from .errors import ConfigMismatch, EmptyContext, FormatError, PlanMismatch
from .spectral import MelSpectrogram

INSERTION = "insertion"
REPLACEMENT = "replacement"
DELETION = "deletion"


@dataclass(frozen=True)
class EditOp:
    """One edit against the original word list.

    ``orig_range`` is a half-open word-index range; it is empty for a pure
    insertion, whose anchor is ``orig_range[0]`` (the word the new material
    is inserted before; equal to the word count for an append).
    """

    kind: str
    orig_range: tuple[int, int]
    new_words: tuple[str, ...]

    def __post_init__(self):
        a, b = self.orig_range
        if not 0 <= a <= b:
            raise ValueError(f"bad word range [{a}, {b})")
        object.__setattr__(self, "new_words", tuple(self.new_words))
        if self.kind == DELETION and (self.new_words or a == b):
            raise ValueError("deletion must remove words and add none")
        if self.kind == INSERTION and (not self.new_words or a != b):
            raise ValueError("insertion must add words at an empty range")
        if self.kind == REPLACEMENT and (not self.new_words or a == b):
            raise ValueError("replacement needs both old and new words")
        if self.kind not in (INSERTION, REPLACEMENT, DELETION):
            raise ValueError(f"unknown edit kind {self.kind!r}")

    @property
    def anchor(self) -> int:
        return self.orig_range[0]


@dataclass(frozen=True)
class EditPlan:
    """Ordered non-overlapping edit ops taking orig_words to edited_words."""

    ops: tuple[EditOp, ...]
    orig_words: tuple[str, ...]
    edited_words: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "orig_words", tuple(self.orig_words))
        object.__setattr__(self, "edited_words", tuple(self.edited_words))
        prev_end = 0
        for op in self.ops:
            a, b = op.orig_range
            if a < prev_end:
                raise ValueError("ops must be ordered and non-overlapping")
            if b > len(self.orig_words):
                raise ValueError("op range exceeds original word list")
            prev_end = b
        if replay_plan(self) != self.edited_words:
            raise ValueError("ops do not transform orig_words into edited_words")


def replay_plan(plan: EditPlan) -> tuple[str, ...]:
    """Apply the plan's ops to its original word list."""
    out: list[str] = []
    cursor = 0
    for op in plan.ops:
        a, b = op.orig_range
        out.extend(plan.orig_words[cursor:a])
        out.extend(op.new_words)
        cursor = b
    out.extend(plan.orig_words[cursor:])
    return tuple(out)


def _lcs_keep_flags(orig: list[str], edited: list[str]):
    """Boolean keep-masks for both sequences from an LCS alignment."""
    m, n = len(orig), len(edited)
    table = np.zeros((m + 1, n + 1), dtype=np.int32)
    for i in range(m - 1, -1, -1):
        for j in range(n - 1, -1, -1):
            if orig[i] == edited[j]:
                table[i, j] = table[i + 1, j + 1] + 1
            else:
                table[i, j] = max(table[i + 1, j], table[i, j + 1])
    keep_orig = [False] * m
    keep_edit = [False] * n
    i = j = 0
    while i < m and j < n:
        if orig[i] == edited[j]:
            keep_orig[i] = keep_edit[j] = True
            i += 1
            j += 1
        elif table[i + 1, j] >= table[i, j + 1]:
            i += 1
        else:
            j += 1
    return keep_orig, keep_edit


def diff_words(orig, edited) -> EditPlan:
    """Derive an EditPlan from two tokenized, case-normalized word lists."""
    orig = list(orig)
    edited = list(edited)
    keep_orig, keep_edit = _lcs_keep_flags(orig, edited)

    ops: list[EditOp] = []
    i = j = 0
    while i < len(orig) or j < len(edited):
        if i < len(orig) and j < len(edited) and keep_orig[i] and keep_edit[j]:
            i += 1
            j += 1
            continue
        a = i
        while i < len(orig) and not keep_orig[i]:
            i += 1
        new_start = j
        while j < len(edited) and not keep_edit[j]:
            j += 1
        new_words = tuple(edited[new_start:j])
        if i > a and new_words:
            ops.append(EditOp(REPLACEMENT, (a, i), new_words))
        elif i > a:
            ops.append(EditOp(DELETION, (a, i), ()))
        else:
            ops.append(EditOp(INSERTION, (a, a), new_words))
    return EditPlan(tuple(ops), tuple(orig), tuple(edited))


def splice(
    original: MelSpectrogram,
    region: tuple[int, int],
    predicted: MelSpectrogram | None,
) -> MelSpectrogram:
    """Replace ``region`` with ``predicted`` frames (drop it when None)."""
    start, end = region
    if not 0 <= start <= end <= original.n_frames:
        raise IndexError(
            f"region [{start}, {end}) out of range for {original.n_frames} frames"
        )
    if predicted is None:
        middle = original.data[:0]
    else:
        if predicted.n_mels != original.n_mels or predicted.config != original.config:
            raise ConfigMismatch("predicted frames carry a different mel config")
        middle = predicted.data.astype(original.data.dtype, copy=False)
    data = np.concatenate([original.data[:start], middle, original.data[end:]])
    return MelSpectrogram(data, original.config)


def baseline_predict(
    original: MelSpectrogram, region: tuple[int, int], target_len: int
) -> MelSpectrogram:
    """Context interpolation filler: per-bin linear ramp across the region.

    Interpolates from the last frame before the region to the first frame
    after it at positions k/(target_len+1); with context on only one side
    that frame is repeated.
    """
    start, end = region
    if not 0 <= start <= end <= original.n_frames:
        raise IndexError(f"region [{start}, {end}) out of range")
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    left = original.data[start - 1] if start > 0 else None
    right = original.data[end] if end < original.n_frames else None
    if left is None and right is None:
        raise EmptyContext("no context frame on either side of the region")
    if left is None:
        left = right
    if right is None:
        right = left
    t = (np.arange(1, target_len + 1) / (target_len + 1))[:, None]
    frames = left[None, :] * (1.0 - t) + right[None, :] * t
    return MelSpectrogram(frames.astype(original.data.dtype), original.config)


def edit_pipeline(
    original: MelSpectrogram,
    table: AlignmentTable,
    plan: EditPlan,
    predictor=None,
) -> MelSpectrogram:
    """Apply every op of the plan to the original spectrogram.

    Ops are processed right-to-left so earlier frame indices stay valid.
    The predicted duration for inserted/replacing material is
    ``round(word_count * median word duration)``, clamped to at least one
    frame; ``predictor(original, region, target_len)`` defaults to
    ``baseline_predict``.
    """
    plan_words = tuple(w.casefold() for w in plan.orig_words)
    table_words = tuple(w.casefold() for w in table.words)
    if plan_words != table_words:
        raise PlanMismatch(
            f"plan original words {plan_words} do not match alignment words {table_words}"
        )
    if predictor is None:
        predictor = baseline_predict
    median_dur = float(np.median(table.word_durations)) if table.n_words else 0.0

    result = original
    for op in reversed(plan.ops):
        a, b = op.orig_range
        if op.kind == INSERTION:
            if a < table.n_words:
                anchor_frame = word_span_frames(table, a, a)[0]
            else:
                anchor_frame = word_span_frames(table, table.n_words - 1, table.n_words - 1)[1]
            region = (anchor_frame, anchor_frame)
        else:
            region = word_span_frames(table, a, b - 1)
        if op.kind == DELETION:
            result = splice(result, region, None)
        else:
            target_len = max(1, round(len(op.new_words) * median_dur))
            predicted = predictor(result, region, target_len)
            result = splice(result, region, predicted)
    return result


def plan_to_json(plan: EditPlan) -> dict:
    return {
        "ops": [
            {
                "kind": op.kind,
                "orig_range": list(op.orig_range),
                "anchor": op.anchor,
                "new_words": list(op.new_words),
            }
            for op in plan.ops
        ],
        "orig_words": list(plan.orig_words),
        "edited_words": list(plan.edited_words),
    }


def plan_from_json(obj) -> EditPlan:
    try:
        ops = tuple(
            EditOp(
                kind=str(o["kind"]),
                orig_range=(int(o["orig_range"][0]), int(o["orig_range"][1])),
                new_words=tuple(str(w) for w in o["new_words"]),
            )
            for o in obj["ops"]
        )
        return EditPlan(
            ops=ops,
            orig_words=tuple(str(w) for w in obj["orig_words"]),
            edited_words=tuple(str(w) for w in obj["edited_words"]),
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed edit plan JSON: {exc}") from exc
