"""Deterministic clean/corrupted/mask sample sets and their manifest.

Everything written by :func:`build_dataset` is a pure function of the clean
image directory, the template file, the split sizes and the master seed.
Clean sources are partitioned across splits before sampling, so no source
crater ever appears in two splits.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    CoverageError,
    DatasetLoadError,
    FormatError,
    PlacementError,
    ValidationError,
)
from .mosaic_io import (
    encode_png,
    quantize,
    read_image,
    read_image_u8,
    read_mask,
    resize_bilinear,
)
from .stripes import (
    DEFAULT_MAX_COVERAGE,
    load_templates,
    mask_coverage,
    save_templates,
    superimpose,
)

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = (".png", ".pgm")

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x):
    """SplitMix64 finalizer: a bijective 64-bit avalanche mix."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sample_seed(master_seed, index):
    """Output ``index`` of the SplitMix64 stream started at ``master_seed``.

    Distinct indices give distinct seeds (the finalizer is a bijection and
    the pre-mix states differ modulo 2**64 for any index below 2**64).
    """
    return splitmix64(master_seed + (index + 1) * _GAMMA)


@dataclass
class SamplePair:
    id: int
    split: str
    source: str
    clean_path: str
    corrupted_path: str
    mask_path: str
    template_id: int
    seed: int


@dataclass
class DatasetManifest:
    crop_size: int
    master_seed: int
    max_coverage: float
    template_file: str
    counts: dict
    sources: list
    samples: list = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: str = field(default=".", repr=False, compare=False)

    def split_samples(self, split):
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [s for s in self.samples if s.split == split]

    def path(self, rel):
        return os.path.join(self.root, rel)

    def to_dict(self):
        d = asdict(self)
        d.pop("root")
        return d

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: invalid manifest JSON: {exc}") from None
        if d.get("version") != MANIFEST_VERSION:
            raise FormatError(f"{path}: unsupported manifest version {d.get('version')!r}")
        d["samples"] = [SamplePair(**s) for s in d["samples"]]
        return cls(**d, root=os.path.dirname(os.path.abspath(path)))


def list_images(directory):
    names = sorted(
        n for n in os.listdir(directory) if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS
    )
    return [os.path.join(directory, n) for n in names]


def _allocate_sources(n_sources, counts):
    """Number of sources per split: proportional to sample counts, >= 1 where needed."""
    active = [s for s in SPLITS if counts[s] > 0]
    if n_sources < len(active):
        raise ValidationError(
            f"{n_sources} clean source(s) cannot be split disjointly across {len(active)} splits"
        )
    total = sum(counts[s] for s in active)
    alloc = {s: 0 for s in SPLITS}
    spare = n_sources - len(active)
    # integer quotient/remainder so ties are exact, then broken by split order
    quot = {s: divmod(spare * counts[s], total) for s in active}
    for s in active:
        alloc[s] = 1 + quot[s][0]
    leftover = n_sources - sum(alloc.values())
    for s in sorted(active, key=lambda s: -quot[s][1])[:leftover]:
        alloc[s] += 1
    return alloc


def _clean_crop(path, crop_size):
    img = read_image(path)
    if img.shape != (crop_size, crop_size):
        img = resize_bilinear(img, crop_size, crop_size)
    return quantize(img)


def _render_sample(clean_u8, template, seed, max_coverage):
    corrupted, mask = superimpose(clean_u8 / 255.0, template, seed, max_coverage)
    return quantize(corrupted), mask


def build_dataset(
    clean_dir,
    template_file,
    n_train,
    n_val,
    n_test,
    master_seed,
    out_dir,
    crop_size=64,
    max_coverage=DEFAULT_MAX_COVERAGE,
):
    """Synthesize the sample triples and write them with ``manifest.json`` into ``out_dir``."""
    counts = {"train": int(n_train), "val": int(n_val), "test": int(n_test)}
    if counts["train"] < 1:
        raise ValidationError("n_train must be at least 1")
    if counts["val"] < 0 or counts["test"] < 0:
        raise ValidationError("n_val and n_test must be non-negative")
    if not 0 <= int(master_seed) < 2**64:
        raise ValidationError("master_seed must be an integer in [0, 2**64)")
    master_seed = int(master_seed)
    sources = list_images(clean_dir)
    if not sources:
        raise ValidationError(f"no .png/.pgm clean images in {clean_dir}")
    templates = load_templates(template_file)
    if not templates:
        raise ValidationError(f"{template_file} holds no templates")
    for i, t in enumerate(templates):
        if t.span > crop_size:
            raise PlacementError(f"template {i} spans {t.span} px, wider than crop size {crop_size}")
        cov = mask_coverage(t.render(crop_size, crop_size))
        if cov > max_coverage:
            raise CoverageError(
                f"template {i} covers {cov:.4f} of a {crop_size}px crop, above max_coverage={max_coverage}"
            )

    os.makedirs(out_dir, exist_ok=True)
    src_dir = os.path.join(out_dir, "sources")
    os.makedirs(src_dir, exist_ok=True)
    save_templates(templates, os.path.join(out_dir, "templates.json"))

    perm = np.random.default_rng(master_seed).permutation(len(sources))
    alloc = _allocate_sources(len(sources), counts)
    split_of = {}
    pos = 0
    for s in SPLITS:
        for k in perm[pos : pos + alloc[s]]:
            split_of[int(k)] = s
        pos += alloc[s]

    source_records = []
    clean_cache = {}
    for k, path in enumerate(sources):
        stem = os.path.splitext(os.path.basename(path))[0]
        rel = os.path.join("sources", f"{k:04d}_{stem}.png")
        clean_u8 = _clean_crop(path, crop_size)
        with open(os.path.join(out_dir, rel), "wb") as f:
            f.write(encode_png(clean_u8))
        clean_cache[k] = clean_u8
        source_records.append({"name": os.path.basename(path), "path": rel, "split": split_of[k]})

    samples = []
    index = 0
    for split in SPLITS:
        pool = [k for k in range(len(sources)) if split_of[k] == split]
        if counts[split]:
            os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for _ in range(counts[split]):
            seed = sample_seed(master_seed, index)
            rng = np.random.default_rng(seed)
            k = pool[int(rng.integers(len(pool)))]
            tid = int(rng.integers(len(templates)))
            corrupted_u8, mask = _render_sample(clean_cache[k], templates[tid], seed, max_coverage)
            base = os.path.join(split, f"{index:06d}")
            rec = SamplePair(
                id=index,
                split=split,
                source=source_records[k]["name"],
                clean_path=source_records[k]["path"],
                corrupted_path=base + "_corrupted.png",
                mask_path=base + "_mask.png",
                template_id=tid,
                seed=seed,
            )
            with open(os.path.join(out_dir, rec.corrupted_path), "wb") as f:
                f.write(encode_png(corrupted_u8))
            with open(os.path.join(out_dir, rec.mask_path), "wb") as f:
                f.write(encode_png(mask))
            samples.append(rec)
            index += 1

    manifest = DatasetManifest(
        crop_size=crop_size,
        master_seed=master_seed,
        max_coverage=max_coverage,
        template_file="templates.json",
        counts=counts,
        sources=source_records,
        samples=samples,
        root=os.path.abspath(out_dir),
    )
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def _load_sample(manifest, rec):
    try:
        corrupted = read_image(manifest.path(rec.corrupted_path))
        clean = read_image(manifest.path(rec.clean_path))
        mask = read_mask(manifest.path(rec.mask_path))
    except (OSError, FormatError) as exc:
        raise DatasetLoadError(f"sample {rec.id}: {exc}") from None
    if not (corrupted.shape == clean.shape == mask.shape):
        raise DatasetLoadError(f"sample {rec.id}: raster dimensions differ")
    off = ~mask
    if not np.array_equal(corrupted[off], clean[off]) or np.any(corrupted[mask] != 0):
        raise DatasetLoadError(f"sample {rec.id}: corrupted image violates the pairing invariant")
    return corrupted, clean, mask


def load_batch(manifest, split, indices):
    """``(corrupted, clean, masks)`` tensors ``[N, 1, H, W]`` in the order of ``indices``."""
    recs = manifest.split_samples(split)
    batch = []
    for i in indices:
        if not 0 <= i < len(recs):
            raise ValidationError(f"index {i} out of range for split {split!r} ({len(recs)} samples)")
        batch.append(_load_sample(manifest, recs[i]))
    if not batch:
        raise ValidationError("empty index list")
    corrupted, clean, masks = (np.stack(t)[:, None] for t in zip(*batch))
    return corrupted, clean, masks.astype(np.float64)


def load_split(manifest, split):
    n = len(manifest.split_samples(split))
    return load_batch(manifest, split, range(n))


def verify_manifest(manifest, clean_dir=None):
    """Re-derive every sample and compare it byte-for-byte with the stored files.

    Discrepancies are reported, never raised. With ``clean_dir`` the resized
    clean sources are re-derived from the originals as well.
    """
    discrepancies = []
    report = {"counts": {}, "mean_coverage": {}, "discrepancies": discrepancies}

    tags = [s.split for s in manifest.samples]
    for split in SPLITS:
        n = tags.count(split)
        report["counts"][split] = n
        if n != manifest.counts.get(split, 0):
            discrepancies.append({"id": None, "file": "manifest.json",
                                  "reason": f"{split} count {n} != declared {manifest.counts.get(split)}"})
    seen = {}
    for s in manifest.samples:
        seen.setdefault(s.clean_path, set()).add(s.split)
    for path, splits in seen.items():
        if len(splits) > 1:
            discrepancies.append({"id": None, "file": path,
                                  "reason": f"source used in several splits: {sorted(splits)}"})

    try:
        templates = load_templates(manifest.path(manifest.template_file))
    except (OSError, FormatError) as exc:
        discrepancies.append({"id": None, "file": manifest.template_file, "reason": str(exc)})
        report["ok"] = False
        return report

    if clean_dir is not None:
        originals = {os.path.basename(p): p for p in list_images(clean_dir)}
        for src in manifest.sources:
            orig = originals.get(src["name"])
            if orig is None:
                discrepancies.append({"id": None, "file": src["path"], "reason": "original missing"})
                continue
            expected = encode_png(_clean_crop(orig, manifest.crop_size))
            if _read_bytes(manifest.path(src["path"])) != expected:
                discrepancies.append({"id": None, "file": src["path"], "reason": "source bytes differ"})

    coverage = {split: [] for split in SPLITS}
    clean_cache = {}
    for rec in manifest.samples:
        try:
            if rec.clean_path not in clean_cache:
                clean_cache[rec.clean_path] = read_image_u8(manifest.path(rec.clean_path))
            corrupted_u8, mask = _render_sample(
                clean_cache[rec.clean_path], templates[rec.template_id], rec.seed, manifest.max_coverage
            )
        except Exception as exc:
            discrepancies.append({"id": rec.id, "file": rec.clean_path, "reason": f"cannot re-derive: {exc}"})
            continue
        coverage[rec.split].append(mask_coverage(mask))
        for rel, payload in ((rec.corrupted_path, encode_png(corrupted_u8)), (rec.mask_path, encode_png(mask))):
            stored = _read_bytes(manifest.path(rel))
            if stored is None:
                discrepancies.append({"id": rec.id, "file": rel, "reason": "missing"})
            elif stored != payload:
                discrepancies.append({"id": rec.id, "file": rel, "reason": "bytes differ"})

    for split in SPLITS:
        report["mean_coverage"][split] = float(np.mean(coverage[split])) if coverage[split] else None
    allcov = [c for split in SPLITS for c in coverage[split]]
    report["overall_mean_coverage"] = float(np.mean(allcov)) if allcov else None
    report["ok"] = not discrepancies
    return report


def _read_bytes(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError:
        return None
