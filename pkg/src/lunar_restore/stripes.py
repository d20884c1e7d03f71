"""Vertical black-stripe corruption: detection, templates and superposition.

A stripe mask is a boolean ``(h, w)`` array, True where a pixel is missing.
A :class:`StripeTemplate` is the scale-free description of the stripe runs
found in a real corrupted crop; it can be stamped onto any clean crop at a
seeded random horizontal position.
"""

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (
    CoverageError,
    FormatError,
    NoStripesError,
    PlacementError,
    ValidationError,
)
from .validation import check_gray_image, check_mask

MAX_SEED = 2**64 - 1
DEFAULT_ZERO_THRESH = 1.0 / 255.0
DEFAULT_COL_FRAC_THRESH = 0.5
DEFAULT_MAX_COVERAGE = 0.02


class StripeRun(NamedTuple):
    col_offset: int
    width_px: int
    row_start_frac: float
    row_end_frac: float

    def row_span(self, h):
        start = math.floor(self.row_start_frac * h + 0.5)
        end = math.floor(self.row_end_frac * h + 0.5)
        start = min(max(start, 0), h - 1)
        # every run keeps at least one row, even on very short crops
        return start, min(max(end, start + 1), h)


@dataclass(frozen=True)
class StripeTemplate:
    runs: tuple = field(default_factory=tuple)

    def __post_init__(self):
        runs = tuple(StripeRun(int(r[0]), int(r[1]), float(r[2]), float(r[3])) for r in self.runs)
        object.__setattr__(self, "runs", tuple(sorted(runs)))
        prev_end = None
        for r in self.runs:
            if r.width_px < 1 or r.col_offset < 0:
                raise ValidationError(f"invalid stripe run {r}")
            if not (0.0 <= r.row_start_frac < r.row_end_frac <= 1.0):
                raise ValidationError(f"invalid row extent in stripe run {r}")
            if prev_end is not None and r.col_offset < prev_end:
                raise ValidationError("stripe runs overlap in columns")
            prev_end = r.col_offset + r.width_px

    @property
    def span(self):
        """Horizontal footprint in pixels (0 for an empty template)."""
        if not self.runs:
            return 0
        return max(r.col_offset + r.width_px for r in self.runs)

    def render(self, w, h, col=0):
        """Boolean mask of this template placed with its origin at column ``col``."""
        if col < 0 or col + self.span > w:
            raise PlacementError(
                f"template of span {self.span} does not fit at column {col} in width {w}"
            )
        mask = np.zeros((h, w), dtype=bool)
        for r in self.runs:
            y0, y1 = r.row_span(h)
            mask[y0:y1, col + r.col_offset : col + r.col_offset + r.width_px] = True
        return mask

    def to_dict(self):
        return {"runs": [r._asdict() for r in self.runs]}

    @classmethod
    def from_dict(cls, data):
        runs = data["runs"] if isinstance(data, dict) else data
        try:
            return cls(tuple(
                StripeRun(r["col_offset"], r["width_px"], r["row_start_frac"], r["row_end_frac"])
                for r in runs
            ))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed stripe template: {exc}") from None


def _vertical_runs(col):
    """Start/end (exclusive) of every maximal True run in a 1-D boolean array."""
    padded = np.concatenate(([False], col, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return edges[0::2], edges[1::2]


def detect_stripes(img, zero_thresh=DEFAULT_ZERO_THRESH, col_frac_thresh=DEFAULT_COL_FRAC_THRESH):
    """Mask pixels that are dark and part of a long enough vertical dark run.

    A pixel qualifies if its value is ``<= zero_thresh`` and the maximal run
    of such pixels in its column is at least ``col_frac_thresh * h`` long.
    Crater shadows are dark too, but rarely span half a crop vertically.
    """
    img = check_gray_image(img)
    h, w = img.shape
    dark = img <= zero_thresh
    min_len = col_frac_thresh * h
    mask = np.zeros_like(dark)
    for x in np.flatnonzero(dark.any(axis=0)):
        starts, ends = _vertical_runs(dark[:, x])
        for s, e in zip(starts, ends):
            if e - s >= min_len:
                mask[s:e, x] = True
    return mask


def extract_template(mask):
    """Distill a mask into a template: one run per maximal rectangle of columns.

    Adjacent columns sharing the same row interval merge into one run. Row
    extents are stored as fractions of the mask height.
    """
    mask = check_mask(mask)
    h, w = mask.shape
    cols = []
    for x in np.flatnonzero(mask.any(axis=0)):
        starts, ends = _vertical_runs(mask[:, x])
        if len(starts) > 1:
            raise ValidationError(
                f"column {x} holds {len(starts)} separate vertical runs; "
                "templates allow one run per column"
            )
        cols.append((int(x), int(starts[0]), int(ends[0])))
    if not cols:
        raise NoStripesError("no stripes found")

    rects = []  # [x_start, x_end, y0, y1]
    for x, y0, y1 in cols:
        if rects and rects[-1][1] == x and rects[-1][2:] == [y0, y1]:
            rects[-1][1] = x + 1
        else:
            rects.append([x, x + 1, y0, y1])
    origin = rects[0][0]
    return StripeTemplate(tuple(
        StripeRun(x0 - origin, x1 - x0, y0 / h, y1 / h) for x0, x1, y0, y1 in rects
    ))


def _check_seed(seed):
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or not 0 <= seed <= MAX_SEED:
        raise ValidationError(f"seed must be an integer in [0, 2**64), got {seed!r}")
    return int(seed)


def placement_column(template, width, seed):
    """Seeded uniform draw of the template's left column among valid offsets."""
    seed = _check_seed(seed)
    span = template.span
    if span > width:
        raise PlacementError(f"template span {span} px exceeds image width {width} px")
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, width - span + 1))


def superimpose(clean, template, seed, max_coverage=None):
    """Stamp ``template`` onto ``clean``; returns ``(corrupted, mask)``.

    Masked pixels become exactly 0, every other pixel is copied unchanged.
    With ``max_coverage`` set, a placement covering more than that fraction of
    the image raises :class:`CoverageError`.
    """
    clean = check_gray_image(clean)
    h, w = clean.shape
    if not template.runs:
        _check_seed(seed)
        return clean.copy(), np.zeros((h, w), dtype=bool)
    col = placement_column(template, w, seed)
    mask = template.render(w, h, col)
    if max_coverage is not None and mask_coverage(mask) > max_coverage:
        raise CoverageError(
            f"template covers {mask_coverage(mask):.4f} of a {w}x{h} image, "
            f"above max_coverage={max_coverage}"
        )
    corrupted = clean.copy()
    corrupted[mask] = 0.0
    return corrupted, mask


def mask_coverage(mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return 0.0
    return float(np.count_nonzero(mask)) / mask.size


def save_templates(templates, path, sources=None):
    doc = {"version": 1, "templates": []}
    for i, t in enumerate(templates):
        entry = t.to_dict()
        if sources is not None:
            entry["source"] = sources[i]
        doc["templates"].append(entry)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_templates(path):
    """Load a template file: ``{"templates": [...]}`` or a bare list of runs."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if isinstance(doc, list):
        return [StripeTemplate.from_dict(doc)]
    if not isinstance(doc, dict) or "templates" not in doc:
        raise FormatError(f"{path}: expected a 'templates' list")
    return [StripeTemplate.from_dict(t) for t in doc["templates"]]
