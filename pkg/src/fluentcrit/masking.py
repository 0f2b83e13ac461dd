"""Word-level masking: pick a contiguous word run and fill it with noise.

The run is chosen so that its word-frame count is as close as possible to
``ratio * non_silent_frames``; ties are broken uniformly at random with a
seeded generator, so selection is fully reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import AlignmentTable, word_span_frames
from .errors import FormatError, NoWords
from .spectral import MelSpectrogram


@dataclass(frozen=True)
class MaskSpec:
    """A word-aligned half-open frame span designated as the edited region."""

    start: int
    end: int
    first_word: int
    last_word: int
    ratio_target: float
    seed: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"bad span [{self.start}, {self.end})")
        if not 0.0 <= self.ratio_target <= 1.0:
            raise ValueError(f"ratio_target must be in [0, 1], got {self.ratio_target}")

    @property
    def span(self) -> tuple[int, int]:
        return self.start, self.end

    @property
    def n_frames(self) -> int:
        return self.end - self.start


def select_word_mask(table: AlignmentTable, ratio: float, seed: int) -> MaskSpec:
    """Choose the word run whose frame count best matches the mask ratio.

    The target is ``ratio`` times the non-silent frame total; a run's count
    is the sum of its word durations (inter-word silence inside the span is
    masked along with it but does not count toward the ratio).  All runs at
    the minimum distance are equally likely.
    """
    if table.n_words == 0:
        raise NoWords("alignment has no words to mask")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"mask ratio must be in (0, 1], got {ratio}")

    target = ratio * table.non_silent_frames
    cumsum = np.concatenate([[0], np.cumsum(table.word_durations)])
    best: list[tuple[int, int]] = []
    best_dist = None
    for i in range(table.n_words):
        for j in range(i, table.n_words):
            dist = abs(float(cumsum[j + 1] - cumsum[i]) - target)
            if best_dist is None or dist < best_dist - 1e-12:
                best_dist = dist
                best = [(i, j)]
            elif abs(dist - best_dist) <= 1e-12:
                best.append((i, j))

    rng = np.random.default_rng(seed)
    first, last = best[int(rng.integers(len(best)))]
    start, end = word_span_frames(table, first, last)
    return MaskSpec(start, end, first, last, ratio, seed)


def apply_mask(mel: MelSpectrogram, spec: MaskSpec, seed: int) -> MelSpectrogram:
    """Replace the masked span with seeded standard-normal noise.

    Frames outside the span are copied bit-identically; the shape and
    config are unchanged.
    """
    if spec.end > mel.n_frames:
        raise IndexError(
            f"mask span [{spec.start}, {spec.end}) exceeds {mel.n_frames} frames"
        )
    out = mel.data.copy()
    rng = np.random.default_rng(seed)
    out[spec.start:spec.end] = rng.standard_normal(
        (spec.n_frames, mel.n_mels)
    ).astype(out.dtype, copy=False)
    return MelSpectrogram(out, mel.config)


def mask_to_json(spec: MaskSpec) -> dict:
    return {
        "start": spec.start,
        "end": spec.end,
        "first_word": spec.first_word,
        "last_word": spec.last_word,
        "lambda": spec.ratio_target,
        "seed": spec.seed,
    }


def mask_from_json(obj) -> MaskSpec:
    try:
        return MaskSpec(
            start=int(obj["start"]),
            end=int(obj["end"]),
            first_word=int(obj["first_word"]),
            last_word=int(obj["last_word"]),
            ratio_target=float(obj["lambda"]),
            seed=int(obj["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed mask JSON: {exc}") from exc
