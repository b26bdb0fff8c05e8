"""Differentiable forward models: first Born, first Rytov and multi-slice.

Volume conventions
------------------
* ``V`` (µm⁻²) is the scattering potential ``(k²/4π)(n² − n0²)`` on the
  ``[x, y, z]`` voxel grid, centred at index ``n // 2``.
* ``Ṽ = spectrum(V)`` is its unitary 3D DFT in FFT order, referenced to the
  centre voxel.
* ``δn`` is the RI deviation ``n − n0`` used by the multi-slice model.

Fields carry the fast ``exp(i k n0 z)`` carrier removed. Per-LED stacks have
shape ``(P, nx, ny)``.

The Born field is scaled physically, so that for weak objects it agrees with
the multi-slice field to first order. Any residual global scale is absorbed by
the optimised per-LED amplitudes ``u0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (CapWavevectors, IlluminationWavevectors, SystemGeometry,
                       cap_offsets, ewald_cap, illumination_wavevectors)

MODELS = ("born", "rytov", "multislice")
_SPATIAL = (-3, -2, -1)


# ---------------------------------------------------------------- potentials and spectra

def scattering_potential_from_ri(n, n0: float, wavelength: float):
    """``V = (k²/4π)(n² − n0²)``; accepts arrays or tensors."""
    k = 2 * np.pi / wavelength
    c = k ** 2 / (4 * np.pi)
    if isinstance(n, Tensor):
        return ad.mul(ad.sub(ad.mul(n, n), n0 ** 2), c)
    n = np.asarray(n)
    return c * (n * n - n0 ** 2)


def ri_from_scattering_potential(V, n0: float, wavelength: float):
    """Principal-branch inverse of :func:`scattering_potential_from_ri` (Re n ≥ 0)."""
    k = 2 * np.pi / wavelength
    c = 4 * np.pi / k ** 2
    if isinstance(V, Tensor):
        return ad.sqrt(ad.add(ad.mul(V, c), n0 ** 2))
    V = np.asarray(V)
    return np.sqrt(n0 ** 2 + c * V.astype(complex if np.iscomplexobj(V) else float))


def potential_per_ri_contrast(n0: float, wavelength: float) -> float:
    """Linearised ``dV/dn`` at ``n = n0``, i.e. ``(k²/4π)·2n0``."""
    k = 2 * np.pi / wavelength
    return k ** 2 / (4 * np.pi) * 2 * n0


def spectrum(V):
    """Unitary 3D DFT of a centred volume, returned in FFT order."""
    return ad.fftn(ad.ifftshift(V, axes=_SPATIAL), axes=_SPATIAL)


def inverse_spectrum(Vt):
    """Inverse of :func:`spectrum`."""
    return ad.fftshift(ad.ifftn(Vt, axes=_SPATIAL), axes=_SPATIAL)


# ---------------------------------------------------------------- pupil and background

@dataclass
class Pupil:
    """Imaging pupil ``A exp(iφ)`` on the FFT-ordered 2D grid."""

    amplitude: np.ndarray
    phase: object = None  # ndarray, Tensor or None (zero)

    def transfer(self):
        if self.phase is None:
            return self.amplitude.astype(complex)
        return ad.mul(ad.exp(ad.mul(ad.as_tensor(self.phase), 1j)), self.amplitude)


def make_pupil(geom: SystemGeometry, phase=None) -> Pupil:
    """Binary circular pupil of radius ``k na_img``."""
    kx, ky = geom.k_grid_2d()
    amp = (kx ** 2 + ky ** 2 <= (geom.k * geom.na_img) ** 2).astype(float)
    return Pupil(amp, phase)


def background_field(u0, kill: IlluminationWavevectors, geom: SystemGeometry):
    """Plane waves ``u0[p] exp(i(kx x + ky y))``, shape ``(P, nx, ny)``."""
    x, y = geom.coords_2d()
    ramp = np.exp(1j * (kill.kx[:, None, None] * x + kill.ky[:, None, None] * y))
    u0 = ad.as_tensor(u0) if isinstance(u0, Tensor) else np.asarray(u0, dtype=float)
    if isinstance(u0, Tensor):
        return ad.mul(ad.reshape(u0, (-1, 1, 1)), ramp)
    return u0.reshape(-1, 1, 1) * ramp


# ---------------------------------------------------------------- first Born / Rytov

def born_sampling_weights(geom: SystemGeometry, cap: CapWavevectors,
                          kill: IlluminationWavevectors, sampling: str = "nearest"):
    """Flat indices and weights that sample ``Ṽ(k_cap − k_ill)`` on the grid.

    Returns ``(indices, weights)`` with shapes ``(C, P, nx, ny)``; ``C`` is 1
    for nearest sampling and 8 for trilinear interpolation. Weights vanish
    outside the cap mask.
    """
    fx, fy, fz = cap_offsets(geom, cap, kill)
    nx, ny, nz = geom.shape
    mask = cap.mask[None].astype(float)
    if sampling == "nearest":
        ix, iy, iz = (np.rint(f).astype(np.int64) for f in (fx, fy, fz))
        idx = ((ix % nx) * ny + iy % ny) * nz + iz % nz
        return idx[None], np.broadcast_to(mask, idx.shape)[None].copy()
    if sampling != "trilinear":
        raise ValueError(f"unknown sampling {sampling!r}")
    base = [np.floor(f).astype(np.int64) for f in (fx, fy, fz)]
    frac = [f - b for f, b in zip((fx, fy, fz), base)]
    idx, wts = [], []
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                w = mask.copy()
                for c, fr in zip((cx, cy, cz), frac):
                    w = w * (fr if c else 1 - fr)
                i = (((base[0] + cx) % nx) * ny + (base[1] + cy) % ny) * nz + (base[2] + cz) % nz
                idx.append(i)
                wts.append(w)
    return np.stack(idx), np.stack(wts)


def born_field_factor(geom: SystemGeometry, cap: CapWavevectors, kill: IlluminationWavevectors):
    """Per-pixel factor mapping a spectrum sample to the scattered-field spectrum.

    ``2πi δz sqrt(nz) exp(i (kz_cap − kz_ill)(Δz_f − z_ref)) / kz_cap`` on the
    mask, where ``z_ref`` is the axial position of the spectrum's reference
    voxel. The constants convert the unitary DFT into the continuous Fourier
    diffraction theorem and the result into unitary 2D DFT samples.
    """
    kz = np.where(cap.mask, cap.kz, 1.0)
    dzf = geom.focus_offset - geom.volume_origin_z()
    phase = np.exp(1j * (cap.kz[None] - kill.kz[:, None, None]) * dzf)
    f = 2j * np.pi * geom.dz * np.sqrt(geom.nz) * phase / kz[None]
    return np.where(cap.mask[None], f, 0)


def born_scattered_field(Vt, geom: SystemGeometry, pupil: Optional[Pupil] = None,
                         leds=None, sampling: str = "nearest", *, _cache=None):
    """First Born scattered field at the focal plane, shape ``(P, nx, ny)``.

    Parameters
    ----------
    Vt : Tensor or ndarray
        Spectrum ``Ṽ`` (FFT order) of the scattering potential.
    geom : SystemGeometry
    pupil : Pupil, optional
        Defaults to the unaberrated circular pupil.
    leds : index array, optional
        Subset of LEDs to evaluate.
    sampling : {"nearest", "trilinear"}
    """
    if tuple(np.shape(Vt.data if isinstance(Vt, Tensor) else Vt)) != geom.shape:
        raise ValueError(f"spectrum shape {np.shape(Vt)} does not match grid {geom.shape}")
    if _cache is None:
        cap = ewald_cap(geom)
        kill = illumination_wavevectors(geom)
        if leds is not None:
            kill = kill[leds]
        idx, wts = born_sampling_weights(geom, cap, kill, sampling)
        factor = born_field_factor(geom, cap, kill)
    else:
        idx, wts, factor = _cache
    pupil = pupil if pupil is not None else make_pupil(geom)
    Vt = ad.as_tensor(Vt)
    samples = ad.mul(ad.take(Vt, idx[0]), wts[0] * factor)
    for c in range(1, len(idx)):
        samples = ad.add(samples, ad.mul(ad.take(Vt, idx[c]), wts[c] * factor))
    spec = ad.mul(samples, pupil.transfer())
    return ad.fftshift(ad.ifftn(spec, axes=(-2, -1)), axes=(-2, -1))


def born_intensity(u_back, u):
    """``|u_back + u|²``."""
    return ad.abs2(ad.add(u_back, u))


def _check_rytov(u_back):
    data = u_back.data if isinstance(u_back, Tensor) else np.asarray(u_back)
    if np.any(data == 0):
        raise ValueError("Rytov undefined: background field has zero-valued pixels")


def rytov_intensity(u_back, u):
    """``|u_back exp(u / u_back)|²``."""
    _check_rytov(u_back)
    return ad.abs2(ad.mul(u_back, ad.exp(ad.div(u, u_back))))


def phase_sensitive_fields(u_back, u, theta_back: float = 0.0, model: str = "born"):
    """Complex detector fields for holographic (phase-sensitive) data."""
    rot = np.exp(1j * theta_back)
    if model == "born":
        return ad.mul(ad.add(u_back, u), rot)
    if model == "rytov":
        _check_rytov(u_back)
        return ad.mul(ad.mul(u_back, ad.exp(ad.div(u, u_back))), rot)
    raise ValueError(f"unknown model {model!r}")


# ---------------------------------------------------------------- multi-slice

def fresnel_kernel(z: float, k: float, n0: float, kx: np.ndarray, ky: np.ndarray) -> np.ndarray:
    """Angular-spectrum propagator with the carrier removed; evanescent waves zeroed."""
    K = k * n0
    q2 = kx ** 2 + ky ** 2
    prop = q2 <= K ** 2
    root = np.sqrt(np.where(prop, K ** 2 - q2, 0.0))
    return np.where(prop, np.exp(-1j * q2 * z / (K + root)), 0)


def apodization_offset(geom: SystemGeometry, kill: IlluminationWavevectors):
    """Lateral walk-off ``(x_p, y_p)`` of each illumination between entrance and focus."""
    if np.any(kill.kz == 0):
        raise ValueError("illumination with kz = 0 cannot be apodized")
    L = geom.focus_offset + geom.thickness / 2
    return L * kill.kx / kill.kz, L * kill.ky / kill.kz


def _gaussian_window(geom: SystemGeometry, xc: np.ndarray, yc: np.ndarray) -> np.ndarray:
    x, y = geom.coords_2d()
    sx, sy = 0.4 * geom.nx * geom.dx, 0.4 * geom.ny * geom.dy
    return np.exp(-(x[None] - xc[:, None, None]) ** 2 / (2 * sx ** 2)
                  - (y[None] - yc[:, None, None]) ** 2 / (2 * sy ** 2))


def gaussian_apodization(geom: SystemGeometry, kill: IlluminationWavevectors,
                         at_detector: bool = False) -> np.ndarray:
    """Gaussian windows of width 0.4 × FOV, shape ``(P, nx, ny)``.

    Entrance-plane windows are centred at ``(−x_p, −y_p)`` so that the tilted
    beam walks into the centre of the field of view at the focal plane.
    ``at_detector=True`` returns the centred window used on the data.
    """
    if at_detector:
        zero = np.zeros(len(kill))
        return _gaussian_window(geom, zero, zero)
    xp, yp = apodization_offset(geom, kill)
    return _gaussian_window(geom, -xp, -yp)


def apodize_data(images: np.ndarray, geom: SystemGeometry) -> np.ndarray:
    """Multiply intensity data by the squared centred window (the predicted intensity envelope)."""
    w = _gaussian_window(geom, np.zeros(1), np.zeros(1))[0]
    return np.asarray(images) * w ** 2


def multislice_field(dn, geom: SystemGeometry, pupil: Optional[Pupil] = None, leds=None,
                     u0=1.0, apodize: bool = True, return_slices: bool = False):
    """Detector-plane field of the multi-slice model, shape ``(P, nx, ny)``.

    Each slice first propagates the field by ``δz`` and then applies the phase
    screen ``exp(i k δn δz)``. The exit field is propagated to the focal plane
    and filtered by the pupil.
    """
    if geom.dz <= 0:
        raise ValueError("slice spacing must be positive")
    shape = tuple(np.shape(dn.data if isinstance(dn, Tensor) else dn))
    if shape != geom.shape:
        raise ValueError(f"volume shape {shape} does not match grid {geom.shape}")
    kill = illumination_wavevectors(geom)
    if leds is not None:
        kill = kill[leds]
    u0 = u0 if isinstance(u0, Tensor) else np.broadcast_to(np.asarray(u0, dtype=float), (len(kill),))
    u = background_field(u0, kill, geom)
    if apodize:
        u = ad.mul(u, gaussian_apodization(geom, kill))
    kx, ky = geom.k_grid_2d()
    step = fresnel_kernel(geom.dz, geom.k, geom.n0, kx, ky)
    final = fresnel_kernel(geom.focus_offset - geom.thickness / 2, geom.k, geom.n0, kx, ky)
    pupil = pupil if pupil is not None else make_pupil(geom)
    dn = ad.as_tensor(dn)
    screen_scale = 1j * geom.k * geom.dz
    slices = [u]
    for r in range(geom.nz):
        u = ad.ifftn(ad.mul(ad.fftn(u, axes=(-2, -1)), step), axes=(-2, -1))
        u = ad.mul(u, ad.exp(ad.mul(dn[:, :, r], screen_scale)))
        if return_slices:
            slices.append(u)
    out = ad.mul(ad.mul(ad.fftn(u, axes=(-2, -1)), final), pupil.transfer())
    out = ad.ifftn(out, axes=(-2, -1))
    return (out, slices) if return_slices else out


def multislice_forward(dn, geom: SystemGeometry, pupil: Optional[Pupil] = None, leds=None,
                       u0=1.0, apodize: bool = True):
    """Multi-slice intensity ``|u_det|²``."""
    return ad.abs2(multislice_field(dn, geom, pupil, leds, u0, apodize))


# ---------------------------------------------------------------- cached model wrapper

class ForwardModel:
    """Precomputed forward operator for one geometry and scattering model.

    ``predict(S, u0, leds)`` returns intensities (or complex fields when
    ``phase_sensitive``) for the selected LEDs. ``S`` is the spectrum ``Ṽ``
    for ``born``/``rytov`` and the RI deviation ``δn`` for ``multislice``.
    """

    def __init__(self, geom: SystemGeometry, model: str = "born", *, sampling: str = "nearest",
                 apodize: bool = True, theta_back: float = 0.0):
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
        self.geom = geom
        self.model = model
        self.sampling = sampling
        self.apodize = apodize
        self.theta_back = theta_back
        self.kill = illumination_wavevectors(geom)
        self.pupil_amplitude = make_pupil(geom).amplitude
        if model != "multislice":
            cap = ewald_cap(geom)
            self._idx, self._wts = born_sampling_weights(geom, cap, self.kill, sampling)
            self._factor = born_field_factor(geom, cap, self.kill)

    @property
    def n_leds(self) -> int:
        return len(self.kill)

    def _select(self, leds):
        return np.arange(self.n_leds) if leds is None else np.atleast_1d(np.asarray(leds))

    def background(self, u0, leds=None):
        return background_field(u0, self.kill[self._select(leds)], self.geom)

    def scattered(self, Vt, leds=None, pupil_phase=None):
        sel = self._select(leds)
        cache = (self._idx[:, sel], self._wts[:, sel], self._factor[sel])
        return born_scattered_field(Vt, self.geom, Pupil(self.pupil_amplitude, pupil_phase),
                                    sampling=self.sampling, _cache=cache)

    def predict(self, S, u0, leds=None, pupil_phase=None, phase_sensitive: bool = False):
        sel = self._select(leds)
        if self.model == "multislice":
            f = multislice_field(S, self.geom, Pupil(self.pupil_amplitude, pupil_phase), sel,
                                 u0, self.apodize)
            if phase_sensitive:
                return ad.mul(f, np.exp(1j * self.theta_back))
            return ad.abs2(f)
        u_back = self.background(u0, sel)
        u = self.scattered(S, sel, pupil_phase)
        if phase_sensitive:
            return phase_sensitive_fields(u_back, u, self.theta_back, self.model)
        if self.model == "born":
            return born_intensity(u_back, u)
        return rytov_intensity(u_back, u)
