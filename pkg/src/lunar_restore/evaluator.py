"""PSNR/MSE metrics, per-split evaluation reports and side-by-side renderings."""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .dataset import load_batch
from .errors import ValidationError
from .mosaic_io import quantize
from .restorer import as_model, restore_batch
from .validation import check_gray_image, check_mask, check_same_shape

INF = math.inf


def mse(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    d = a - b
    return float(np.mean(d * d))


def _psnr_from_mse(err, max_val):
    if err == 0.0:
        return INF
    return 10.0 * math.log10(max_val * max_val / err)


def psnr(reference, test, max_val=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    return _psnr_from_mse(mse(reference, test), max_val)


def masked_psnr(reference, test, mask, max_val=1.0):
    """PSNR with the mean squared error taken over masked pixels only."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    check_same_shape(reference, test)
    mask = check_mask(mask, reference.shape)
    if not mask.any():
        raise ValidationError("masked PSNR is undefined for an empty mask")
    d = reference[mask] - test[mask]
    return _psnr_from_mse(float(np.mean(d * d)), max_val)


@dataclass
class EvalRecord:
    id: int
    psnr_corrupted_dB: float
    psnr_restored_dB: float
    masked_psnr_restored_dB: float
    mse_restored: float
    masked_psnr_corrupted_dB: float
    psnr_raw_dB: float
    masked_psnr_raw_dB: float
    coverage: float


def aggregate(records):
    """Summary statistics recomputed from the per-sample records."""
    out = {"n": len(records)}
    for key in ("psnr_corrupted_dB", "psnr_restored_dB", "masked_psnr_restored_dB",
                "masked_psnr_corrupted_dB", "psnr_raw_dB", "mse_restored"):
        vals = [getattr(r, key) for r in records if getattr(r, key) is not None]
        out[f"mean_{key}"] = float(np.mean(vals)) if vals else None
        out[f"median_{key}"] = float(np.median(vals)) if vals else None
    improved = [r.psnr_restored_dB > r.psnr_corrupted_dB for r in records]
    out["fraction_improved"] = float(np.mean(improved)) if records else None
    return out


@dataclass
class EvalReport:
    split: str
    checkpoint_id: str
    composited: bool
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def recompute(self):
        self.aggregates = aggregate(self.records)
        return self

    def to_dict(self):
        return _jsonable(asdict(self))

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, allow_nan=False)
            f.write("\n")

    def save_csv(self, path):
        names = [f.name for f in EvalRecord.__dataclass_fields__.values()]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(names)
            for r in self.records:
                w.writerow([_fmt(getattr(r, n)) for n in names])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if v == INF else repr(v)
    return str(v)


def _jsonable(obj):
    # strict JSON has no Infinity; the +inf PSNR sentinel is written as "inf"
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else None)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _maybe_masked(ref, test, mask):
    return masked_psnr(ref, test, mask) if mask.any() else None


def evaluate(model, manifest, split, composite=True, triptych_dir=None, batch_size=16):
    """Restore every sample of ``split`` and score it against its clean crop."""
    model = as_model(model)
    recs = manifest.split_samples(split)
    if not recs:
        raise ValidationError(f"split {split!r} is empty")
    report = EvalReport(split=split, checkpoint_id=model.checkpoint_id, composited=bool(composite))
    if triptych_dir is not None:
        os.makedirs(triptych_dir, exist_ok=True)
    for s in range(0, len(recs), batch_size):
        idx = list(range(s, min(s + batch_size, len(recs))))
        corrupted, clean, masks = load_batch(manifest, split, idx)
        masks = masks.astype(bool)
        raw = restore_batch(model, corrupted, masks, composite=False)
        restored = np.where(masks, raw, corrupted) if composite else raw
        for j, i in enumerate(idx):
            c, r, y, m, p = corrupted[j, 0], restored[j, 0], clean[j, 0], masks[j, 0], raw[j, 0]
            rec = EvalRecord(
                id=recs[i].id,
                psnr_corrupted_dB=psnr(y, c),
                psnr_restored_dB=psnr(y, r),
                masked_psnr_restored_dB=_maybe_masked(y, r, m),
                mse_restored=mse(y, r),
                masked_psnr_corrupted_dB=_maybe_masked(y, c, m),
                psnr_raw_dB=psnr(y, p),
                masked_psnr_raw_dB=_maybe_masked(y, p, m),
                coverage=float(m.mean()),
            )
            report.records.append(rec)
            if triptych_dir is not None:
                render_triptych(
                    c, r, y, rec.psnr_corrupted_dB, rec.psnr_restored_dB,
                    os.path.join(triptych_dir, f"{rec.id:06d}.png"),
                )
    return report.recompute()


SEPARATOR_PX = 4
LABEL_STRIP_PX = 14


def _label(v):
    return "inf dB" if v == INF else f"{v:.2f} dB"


def render_triptych(corrupted, restored, clean, psnr_corrupted, psnr_restored, path):
    """Corrupted | restored | original, left to right, PSNR labels under the first two."""
    panels = [check_gray_image(a, n) for a, n in
              ((corrupted, "corrupted"), (restored, "restored"), (clean, "clean"))]
    check_same_shape(panels[0], panels[1], ("corrupted", "restored"))
    check_same_shape(panels[0], panels[2], ("corrupted", "clean"))
    h, w = panels[0].shape
    width = 3 * w + 2 * SEPARATOR_PX
    canvas = np.full((h + LABEL_STRIP_PX, width), 255, dtype=np.uint8)
    canvas[h:] = 0
    for k, p in enumerate(panels):
        x0 = k * (w + SEPARATOR_PX)
        canvas[:h, x0 : x0 + w] = quantize(p)
    im = Image.fromarray(canvas, mode="L")
    draw = ImageDraw.Draw(im)
    font = ImageFont.load_default()
    for k, v in enumerate((psnr_corrupted, psnr_restored)):
        draw.text((k * (w + SEPARATOR_PX) + 1, h + 1), _label(v), fill=255, font=font)
    im.save(path, format="PNG")
    return path
