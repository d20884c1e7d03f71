"""Procedural crater terrain for fixtures and desk-scale experiments.

Heights are a sum of bowl-shaped craters with raised rims over band-limited
noise; intensity is a Lambertian hillshade lit from the east, mixed with a
smooth albedo field. Intensities stay well above the stripe detector's dark
threshold so only injected stripes read as missing pixels.
"""

import numpy as np

from .mosaic_io import MosaicHeader, quantize, write_mosaic


def _smooth_noise(rng, h, w, beta=2.5):
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.rfftfreq(w)[None, :]
    k = np.sqrt(kx * kx + ky * ky)
    k[0, 0] = 1.0
    amp = k ** (-beta / 2.0)
    amp[0, 0] = 0.0
    spectrum = amp * (rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape))
    field = np.fft.irfft2(spectrum, s=(h, w))
    return field / (np.abs(field).max() + 1e-12)


def crater_heights(h, w, craters):
    """Height field for ``craters``, a list of ``(cx, cy, radius)`` in pixels."""
    z = np.zeros((h, w))
    for cx, cy, r in craters:
        # the rim term is below 1e-6 past 1.7 radii, so only touch that box
        reach = 1.7 * r
        y0, y1 = max(0, int(cy - reach)), min(h, int(np.ceil(cy + reach)) + 1)
        x0, x1 = max(0, int(cx - reach)), min(w, int(np.ceil(cx + reach)) + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.ogrid[y0:y1, x0:x1]
        d = np.hypot(xx - cx, yy - cy) / r
        bowl = np.where(d < 1.0, d * d - 1.0, 0.0)
        rim = 0.25 * np.exp(-((d - 1.0) / 0.18) ** 2)
        z[y0:y1, x0:x1] += r * 0.35 * (bowl + rim)
    return z


def hillshade(z, azimuth_deg=90.0, elevation_deg=35.0):
    gy, gx = np.gradient(z)
    nx, ny, nz = -gx, -gy, np.ones_like(z)
    norm = np.sqrt(nx * nx + ny * ny + nz * nz)
    az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    # x grows westward in the raster, so an eastern sun sits at -x
    lx, ly, lz = -np.cos(el) * np.sin(az), -np.cos(el) * np.cos(az), np.sin(el)
    return np.clip((nx * lx + ny * ly + nz * lz) / norm, 0.0, 1.0)


def crater_field(h, w, seed, n_craters=None, central=True):
    """A ``(h, w)`` float image in roughly [0.1, 0.9] showing a cratered surface."""
    rng = np.random.default_rng(seed)
    if n_craters is None:
        n_craters = max(2, int(h * w / 900))
    craters = []
    if central:
        craters.append((w / 2 + rng.uniform(-2, 2), h / 2 + rng.uniform(-2, 2),
                        rng.uniform(0.22, 0.38) * min(h, w)))
    rmax = max(2.0, 0.15 * min(h, w))
    for _ in range(n_craters):
        craters.append((rng.uniform(0, w), rng.uniform(0, h), rng.uniform(1.5, rmax)))
    z = crater_heights(h, w, craters) + 2.0 * _smooth_noise(rng, h, w)
    shade = hillshade(z)
    albedo = 0.5 + 0.12 * _smooth_noise(rng, h, w, beta=3.0)
    img = 0.1 + 0.8 * np.clip(0.35 * albedo + 0.65 * shade * albedo * 1.6, 0.0, 1.0)
    return np.clip(img, 0.0, 1.0)


def add_vertical_stripes(img, columns, row_ranges=None):
    """Zero the given columns; ``row_ranges`` optionally limits each to ``(y0, y1)``."""
    out = np.array(img, dtype=np.float64, copy=True)
    for i, (x0, width) in enumerate(columns):
        y0, y1 = (0, out.shape[0]) if row_ranges is None else row_ranges[i]
        out[y0:y1, x0 : x0 + width] = 0.0
    return out


def make_mosaic(path, px_per_degree=4.0, seed=0, stripe_lons=(), stripe_width_px=1):
    """Write a whole-Moon fixture mosaic (lon +180..-180, lat +85..-85) and its sidecar.

    ``stripe_lons`` are longitudes at which full-height zero stripes are cut,
    mimicking gaps between adjacent orbital swaths.
    """
    header = MosaicHeader.from_bounds(180.0, -180.0, 85.0, -85.0, px_per_degree)
    h, w = header.height_px, header.width_px
    img = crater_field(h, w, seed, n_craters=int(h * w / 1500), central=False)
    cols = [(int(round((180.0 - lon) * px_per_degree)), stripe_width_px) for lon in stripe_lons]
    img = add_vertical_stripes(img, cols)
    write_mosaic(path, quantize(img), header)
    return header
