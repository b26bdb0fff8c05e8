"""Phantoms, camera and field noise, simulation helpers and image-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .forward import ForwardModel, scattering_potential_from_ri, spectrum
from .geometry import SystemGeometry, bright_field, illumination_wavevectors
from .io import LedStack


# ---------------------------------------------------------------- phantoms

@dataclass
class BeadSpec:
    """Bead pairs stacked along z, one pair per lateral grid cell.

    ``separations`` are edge-to-edge axial gaps (µm). An empty list places one
    single bead per diameter instead. ``diameters`` has one entry per pair or
    a single entry shared by all pairs.
    """

    diameters: Sequence[float]
    separations: Sequence[float] = ()
    n: float = 1.525
    n0: float = 1.515
    supersample: int = 8

    def __post_init__(self):
        if any(d < 0 for d in self.diameters):
            raise ValueError("bead diameters must be >= 0")
        if self.n < 1 or self.n0 < 1:
            raise ValueError("refractive indices must be >= 1")

    def centres(self, geom: SystemGeometry):
        """List of ``(x, y, z, diameter)`` tuples in µm."""
        seps = list(self.separations)
        n_groups = len(seps) if seps else len(self.diameters)
        diams = list(self.diameters)
        if len(diams) == 1:
            diams = diams * n_groups
        if len(diams) != n_groups:
            raise ValueError("need one diameter per bead pair, or a single shared diameter")
        cols = int(np.ceil(np.sqrt(n_groups)))
        rows = int(np.ceil(n_groups / cols))
        Lx, Ly = geom.nx * geom.dx, geom.ny * geom.dy
        x0 = -(geom.nx // 2) * geom.dx - geom.dx / 2  # left voxel edge
        y0 = -(geom.ny // 2) * geom.dy - geom.dy / 2
        beads = []
        for g in range(n_groups):
            r, c = divmod(g, cols)
            cx = _snap(x0 + (r + 0.5) * Lx / rows, geom.dx)
            cy = _snap(y0 + (c + 0.5) * Ly / cols, geom.dy)
            d = diams[g]
            if seps:
                dz = (d + seps[g]) / 2
                beads += [(cx, cy, -dz, d), (cx, cy, dz, d)]
            else:
                beads.append((cx, cy, 0.0, d))
        return beads


def _snap(v, d):
    return float(np.round(v / d) * d)


def sphere_fill(geom: SystemGeometry, centre, diameter: float, supersample: int = 8) -> np.ndarray:
    """Fraction of each voxel inside a sphere; boundary voxels are supersampled."""
    r = diameter / 2
    out = np.zeros(geom.shape)
    if r <= 0:
        return out
    axes = [(np.arange(n) - n // 2) * d for n, d in zip(geom.shape, geom.spacing)]
    for a, c, d, n in zip(axes, centre, geom.spacing, geom.shape):
        if c - r < a[0] - d / 2 - 1e-12 or c + r > a[-1] + d / 2 + 1e-12:
            raise ValueError("bead overlaps the volume boundary")
    X, Y, Z = np.meshgrid(*[a - c for a, c in zip(axes, centre)], indexing="ij")
    dist = np.sqrt(X ** 2 + Y ** 2 + Z ** 2)
    half_diag = 0.5 * np.linalg.norm(geom.spacing)
    out[dist <= r - half_diag] = 1.0
    edge = np.argwhere(np.abs(dist - r) < half_diag)
    s = supersample
    sub = [((np.arange(s) + 0.5) / s - 0.5) * d for d in geom.spacing]
    sx, sy, sz = np.meshgrid(*sub, indexing="ij")
    for i, j, k in edge:
        px = X[i, j, k] + sx
        py = Y[i, j, k] + sy
        pz = Z[i, j, k] + sz
        out[i, j, k] = np.mean(px ** 2 + py ** 2 + pz ** 2 <= r * r)
    return out


def bead_phantom(spec: BeadSpec, geom: SystemGeometry) -> np.ndarray:
    """Complex RI volume with anti-aliased beads of index ``n`` in medium ``n0``."""
    fill = np.zeros(geom.shape)
    for x, y, z, d in spec.centres(geom):
        fill = np.maximum(fill, sphere_fill(geom, (x, y, z), d, spec.supersample))
    return (spec.n0 + fill * (spec.n - spec.n0)).astype(complex)


# ---------------------------------------------------------------- noise

@dataclass
class NoiseSpec:
    """Camera model: full-well capacity and ADC bit depth."""

    well_depth: float = 50_000.0
    bits: int = 8
    mode: str = "poisson-8bit"
    dark_field_boost: bool = True
    max_gain: float = 100.0

    def __post_init__(self):
        if self.well_depth <= 0:
            raise ValueError("well depth must be positive")
        if not 1 <= self.bits <= 16:
            raise ValueError("bits must lie in [1, 16]")
        if self.mode not in ("poisson-8bit", "complex-gaussian", "none"):
            raise ValueError(f"unknown noise mode {self.mode!r}")


def dark_field_gain(I: np.ndarray, bright: np.ndarray, max_gain: float = 100.0) -> np.ndarray:
    """Per-LED exposure gain: bright-field mean over each dark-field image's mean, capped."""
    gain = np.ones(len(I))
    if bright.all() or not bright.any():
        return gain
    ref = I[bright].mean()
    means = I.reshape(len(I), -1).mean(axis=1)
    dark = ~bright
    with np.errstate(divide="ignore"):
        g = np.where(means[dark] > 0, ref / means[dark], max_gain)
    gain[dark] = np.clip(g, 1.0, max_gain)
    return gain


def poisson_camera(I: np.ndarray, spec: NoiseSpec, rng: np.random.Generator,
                   gain: Optional[np.ndarray] = None) -> np.ndarray:
    """Shot noise and ADC quantisation; output is in the input's intensity units.

    The brightest (gain-scaled) pixel maps to the full well. Per-LED ``gain``
    lengthens the exposure before sampling and is divided out afterwards.
    """
    I = np.asarray(I, dtype=float)
    if np.any(I < 0):
        raise ValueError("negative intensity")
    gain = np.ones(len(I)) if gain is None else np.asarray(gain, dtype=float)
    exposed = I * gain.reshape((-1,) + (1,) * (I.ndim - 1))
    peak = exposed.max()
    if peak == 0:
        return np.zeros_like(I)
    scale = spec.well_depth / peak
    counts = rng.poisson(exposed * scale).astype(float)
    levels = 2 ** spec.bits - 1
    digital = np.clip(np.round(counts * levels / spec.well_depth), 0, levels)
    return digital * (spec.well_depth / levels) / scale / gain.reshape((-1,) + (1,) * (I.ndim - 1))


def complex_field_noise_sigma(mu):
    """Per-component std making ``|E|²`` as variable as Poisson counts of mean ``mu``."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise ValueError("mean photon count must be >= 0")
    # sqrt(mu² + mu) − mu written without cancellation
    diff = mu / (np.sqrt(mu * mu + mu) + mu + (mu == 0))
    return np.sqrt(diff / 2)


def add_field_noise(f: np.ndarray, rng: np.random.Generator, sigma=None) -> np.ndarray:
    """Add circular complex Gaussian noise to fields in photon units.

    ``sigma=None`` uses :func:`complex_field_noise_sigma` of ``|f|²`` per pixel.
    """
    f = np.asarray(f, dtype=complex)
    s = complex_field_noise_sigma(np.abs(f) ** 2) if sigma is None else sigma
    return f + s * (rng.standard_normal(f.shape) + 1j * rng.standard_normal(f.shape))


# ---------------------------------------------------------------- simulation

def simulate_stack(ri: np.ndarray, geom: SystemGeometry, model: str = "born",
                   noise: Optional[NoiseSpec] = None, rng=None, phase_sensitive: bool = False,
                   apodize: bool = False) -> LedStack:
    """Forward-simulate an LED stack from an RI volume.

    Born and Rytov use unit background for bright-field LEDs and none for
    dark-field ones; multi-slice uses a unit incident field throughout.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    kill = illumination_wavevectors(geom)
    bright = bright_field(geom, kill)
    fm = ForwardModel(geom, model, apodize=apodize)
    if model == "multislice":
        S = np.asarray(ri) - geom.n0
        u0 = np.ones(len(kill))
    else:
        S = spectrum(scattering_potential_from_ri(np.asarray(ri, dtype=complex), geom.n0, geom.wavelength)).data
        u0 = bright.astype(float)
    pred = fm.predict(S, u0, phase_sensitive=phase_sensitive).data
    meta = {"model": model, "phase_sensitive": phase_sensitive, "u0": u0.tolist()}
    if noise is not None and noise.mode != "none":
        if phase_sensitive:
            # photon units: the brightest pixel holds the full well
            C = np.sqrt(noise.well_depth / np.max(np.abs(pred) ** 2))
            pred = add_field_noise(pred * C, rng) / C
            meta["noise"] = "complex-gaussian"
        else:
            gain = dark_field_gain(pred, bright, noise.max_gain) if noise.dark_field_boost else None
            pred = poisson_camera(pred, noise, rng, gain)
            meta["noise"] = f"poisson-{noise.bits}bit"
    return LedStack(pred, kill.as_array(), "a.u.", meta)


# ---------------------------------------------------------------- metrics

def rmse(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean(np.abs(a - b) ** 2)))


def ssim(a, b, window: int = 7, data_range: Optional[float] = None) -> float:
    """Mean structural similarity of ``a`` against reference ``b`` with a uniform window."""
    a = np.real(np.asarray(a, dtype=complex)).astype(float)
    b = np.real(np.asarray(b, dtype=complex)).astype(float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    L = (b.max() - b.min()) if data_range is None else data_range
    if L == 0:
        L = 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    f = lambda x: uniform_filter(x, size=window, mode="reflect")
    mu_a, mu_b = f(a), f(b)
    n = window ** a.ndim
    cov = n / (n - 1)  # sample covariance, as in the reference formulation
    va = cov * (f(a * a) - mu_a ** 2)
    vb = cov * (f(b * b) - mu_b ** 2)
    vab = cov * (f(a * b) - mu_a * mu_b)
    s = ((2 * mu_a * mu_b + c1) * (2 * vab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    pad = window // 2
    core = tuple(slice(pad, -pad) if n_ > 2 * pad else slice(None) for n_ in a.shape)
    return float(s[core].mean())


def axial_trace(volume, x: int, y: int) -> np.ndarray:
    """Real part of the 1D profile along z through lateral voxel ``(x, y)``."""
    return np.real(np.asarray(volume)[x, y, :]).copy()


def error_histogram(recon, truth, bins: int = 64, value_range=None):
    """2D histogram of (truth, reconstruction) real RI values."""
    t = np.real(np.asarray(truth)).ravel()
    r = np.real(np.asarray(recon)).ravel()
    if t.shape != r.shape:
        raise ValueError("shape mismatch")
    return np.histogram2d(t, r, bins=bins, range=value_range)
