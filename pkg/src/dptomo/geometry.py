"""k-space geometry: Ewald caps, illumination wavevectors and transfer functions.

Units are micrometres for lengths and rad/µm for wavevectors, except LED board
coordinates, which are in millimetres. Every k-space array is stored in FFT
order (DC at index 0); use :func:`centered` to re-centre for display.

Real-space volumes are indexed ``[x, y, z]`` with the coordinate origin at
index ``n // 2`` along each axis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class NyquistWarning(UserWarning):
    """Lateral voxel pitch too coarse for the synthesized bandwidth."""


@dataclass(frozen=True, eq=False)
class SystemGeometry:
    """Microscope and reconstruction-grid description.

    Parameters
    ----------
    wavelength : float
        Vacuum wavelength (µm).
    n0 : float
        Refractive index of the immersion medium.
    na_ill, na_img : float
        Illumination and imaging numerical apertures.
    shape : tuple of int
        Voxel counts ``(nx, ny, nz)``.
    spacing : tuple of float
        Voxel pitch ``(dx, dy, dz)`` in µm.
    led_xy : ndarray, shape (P, 2)
        LED positions on the board (mm), relative to the optical axis.
    led_distance : float
        Distance from the LED board up to the sample plane (mm).
    focus_offset : float
        Focal plane position relative to the sample centre (µm).
    """

    wavelength: float
    n0: float
    na_ill: float
    na_img: float
    shape: tuple
    spacing: tuple
    led_xy: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    led_distance: float = 50.0
    focus_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(d) for d in self.spacing))
        led = np.atleast_2d(np.asarray(self.led_xy, dtype=float))
        object.__setattr__(self, "led_xy", led)
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if self.n0 < 1:
            raise ValueError("n0 must be >= 1")
        if not 0 < self.na_img <= self.n0:
            raise ValueError("na_img must lie in (0, n0]")
        if not 0 <= self.na_ill <= self.n0:
            raise ValueError("na_ill must lie in [0, n0]")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"shape must be three positive ints, got {self.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        if led.shape[1] != 2:
            raise ValueError("led_xy must have shape (P, 2)")
        limit = self.wavelength / (2 * (self.na_ill + self.na_img))
        if max(self.spacing[:2]) > limit * (1 + 1e-12):
            warnings.warn(
                f"lateral pitch {max(self.spacing[:2]):.4g} um exceeds the Nyquist limit "
                f"{limit:.4g} um for na_ill + na_img = {self.na_ill + self.na_img:.3g}",
                NyquistWarning, stacklevel=3)

    # ------------------------------------------------------------ factories

    @classmethod
    def with_led_array(cls, *, wavelength, n0, na_ill, na_img, shape, spacing,
                       led_side=31, led_pitch=4.0, layout="disk", focus_offset=0.0):
        """Square LED board whose outermost on-axis LED sits at ``na_ill``.

        ``layout="disk"`` drops LEDs whose lateral NA exceeds ``na_ill``;
        ``layout="square"`` keeps the full board (corner LEDs then exceed it).
        """
        xy = square_led_grid(led_side, led_pitch)
        half = (led_side - 1) / 2 * led_pitch
        if na_ill == 0 or half == 0:
            xy, distance = np.zeros((1, 2)), 50.0
        else:
            distance = led_distance_for_na(half, na_ill, n0)
            if layout == "disk":
                na = n0 * np.hypot(xy[:, 0], xy[:, 1]) / np.sqrt(
                    xy[:, 0] ** 2 + xy[:, 1] ** 2 + distance ** 2)
                xy = xy[na <= na_ill * (1 + 1e-9)]
            elif layout != "square":
                raise ValueError(f"unknown LED layout {layout!r}")
        return cls(wavelength, n0, na_ill, na_img, shape, spacing, xy, distance, focus_offset)

    @classmethod
    def with_na_grid(cls, *, wavelength, n0, na_ill, na_img, shape, spacing,
                     na_step, led_distance=50.0, focus_offset=0.0):
        """LEDs placed so their lateral NAs form a square grid of pitch ``na_step``.

        Raising ``na_ill`` at a fixed ``na_step`` only adds LEDs, which makes
        transfer-function comparisons across NAs nested.
        """
        m = int(np.floor(na_ill / na_step + 1e-9)) if na_step > 0 else 0
        vals = np.arange(-m, m + 1) * na_step
        nax, nay = np.meshgrid(vals, vals, indexing="ij")
        keep = np.hypot(nax, nay) <= na_ill * (1 + 1e-9)
        s = np.stack([nax[keep], nay[keep]], axis=1) / n0
        cz = np.sqrt(1 - np.sum(s ** 2, axis=1))
        xy = -led_distance * s / cz[:, None]
        return cls(wavelength, n0, na_ill, na_img, shape, spacing, xy + 0.0, led_distance, focus_offset)

    def replace(self, **changes) -> "SystemGeometry":
        vals = {f: getattr(self, f) for f in self.__dataclass_fields__}
        vals.update(changes)
        return SystemGeometry(**vals)

    # ------------------------------------------------------------ derived quantities

    nx = property(lambda self: self.shape[0])
    ny = property(lambda self: self.shape[1])
    nz = property(lambda self: self.shape[2])
    dx = property(lambda self: self.spacing[0])
    dy = property(lambda self: self.spacing[1])
    dz = property(lambda self: self.spacing[2])

    @property
    def k(self) -> float:
        """Vacuum wavenumber 2π/λ."""
        return 2 * np.pi / self.wavelength

    @property
    def k_medium(self) -> float:
        return self.k * self.n0

    @property
    def n_leds(self) -> int:
        return len(self.led_xy)

    @property
    def thickness(self) -> float:
        return self.nz * self.dz

    @property
    def dk(self) -> tuple:
        return tuple(2 * np.pi / (n * d) for n, d in zip(self.shape, self.spacing))

    def k_axes(self):
        """1D wavevector axes (FFT order) for x, y and z."""
        return tuple(2 * np.pi * np.fft.fftfreq(n, d) for n, d in zip(self.shape, self.spacing))

    def k_grid_2d(self):
        kx, ky, _ = self.k_axes()
        return np.meshgrid(kx, ky, indexing="ij")

    def coords_2d(self):
        """Centred lateral coordinate meshgrids (µm)."""
        x = (np.arange(self.nx) - self.nx // 2) * self.dx
        y = (np.arange(self.ny) - self.ny // 2) * self.dy
        return np.meshgrid(x, y, indexing="ij")

    def z_coords(self):
        return (np.arange(self.nz) - self.nz // 2) * self.dz

    def slice_positions(self):
        """Axial positions of the multi-slice phase screens.

        Screen ``r`` sits at ``-Δz/2 + (r + 1) δz``: the field enters at the
        front face, propagates one slice and then receives the slice's phase.
        """
        return -self.thickness / 2 + (np.arange(self.nz) + 1) * self.dz

    def volume_origin_z(self) -> float:
        """Axial position of the voxel the spectrum is referenced to (index nz // 2)."""
        return float(self.slice_positions()[self.nz // 2])


def square_led_grid(n_side: int, pitch: float) -> np.ndarray:
    """Centred ``n_side`` x ``n_side`` LED positions (mm)."""
    c = (np.arange(n_side) - (n_side - 1) / 2) * pitch
    gx, gy = np.meshgrid(c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def led_distance_for_na(offset: float, na: float, n0: float) -> float:
    """Board distance at which an LED ``offset`` mm off-axis has lateral NA ``na``."""
    s = na / n0
    return offset * np.sqrt(1 - s ** 2) / s


def centered(a: np.ndarray) -> np.ndarray:
    """FFT order to centred order (for plots)."""
    return np.fft.fftshift(a)


# ---------------------------------------------------------------- caps and illumination

@dataclass
class CapWavevectors:
    """Ewald-cap wavevectors on the 2D FFT grid; ``kz`` is 0 where ``mask`` is False."""

    kx: np.ndarray
    ky: np.ndarray
    kz: np.ndarray
    mask: np.ndarray


@dataclass
class IlluminationWavevectors:
    """Per-LED incident wavevectors, each component of shape (P,)."""

    kx: np.ndarray
    ky: np.ndarray
    kz: np.ndarray

    def __len__(self):
        return len(self.kx)

    def __getitem__(self, idx) -> "IlluminationWavevectors":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return IlluminationWavevectors(self.kx[idx], self.ky[idx], self.kz[idx])

    def as_array(self) -> np.ndarray:
        return np.stack([self.kx, self.ky, self.kz], axis=1)

    @classmethod
    def from_array(cls, arr) -> "IlluminationWavevectors":
        arr = np.asarray(arr, dtype=float).reshape(-1, 3)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())


def ewald_cap(geom: SystemGeometry) -> CapWavevectors:
    """Cap of the Ewald sphere of radius ``k n0`` admitted by the imaging NA."""
    kx, ky = geom.k_grid_2d()
    K = geom.k_medium
    q2 = kx ** 2 + ky ** 2
    mask = q2 <= (geom.k * geom.na_img) ** 2
    kz = np.where(mask, np.sqrt(np.clip(K ** 2 - q2, 0, None)), 0.0)
    return CapWavevectors(kx, ky, kz, mask)


def illumination_wavevectors(geom: SystemGeometry) -> IlluminationWavevectors:
    """Unit vectors from each LED towards the sample origin, scaled to ``k n0``."""
    if geom.led_distance == 0:
        raise ValueError("degenerate illumination direction: LED board lies in the sample plane")
    X, Y = geom.led_xy[:, 0], geom.led_xy[:, 1]
    D = np.full_like(X, geom.led_distance)
    R = np.sqrt(X ** 2 + Y ** 2 + D ** 2)
    K = geom.k_medium
    return IlluminationWavevectors(-K * X / R + 0.0, -K * Y / R + 0.0, K * D / R)


def bright_field(geom: SystemGeometry, kill: IlluminationWavevectors) -> np.ndarray:
    """True for LEDs whose unscattered light passes the imaging pupil."""
    return kill.kx ** 2 + kill.ky ** 2 <= (geom.k * geom.na_img) ** 2 * (1 + 1e-12)


def cap_offsets(geom: SystemGeometry, cap: CapWavevectors, kill: IlluminationWavevectors):
    """Fractional k-grid coordinates of ``k_cap - k_ill`` for every LED.

    Returns three arrays of shape ``(P, nx, ny)`` in units of the grid spacing
    (not yet wrapped into range).
    """
    dkx, dky, dkz = geom.dk
    fx = (cap.kx[None] - kill.kx[:, None, None]) / dkx
    fy = (cap.ky[None] - kill.ky[:, None, None]) / dky
    fz = (cap.kz[None] - kill.kz[:, None, None]) / dkz
    return fx, fy, fz


def nearest_flat_indices(geom: SystemGeometry, cap: CapWavevectors,
                         kill: IlluminationWavevectors) -> np.ndarray:
    """Flat indices into the FFT-ordered 3D k-grid nearest to each cap − illumination point."""
    fx, fy, fz = cap_offsets(geom, cap, kill)
    nx, ny, nz = geom.shape
    ix = np.rint(fx).astype(np.int64) % nx
    iy = np.rint(fy).astype(np.int64) % ny
    iz = np.rint(fz).astype(np.int64) % nz
    return (ix * ny + iy) * nz + iz


# ---------------------------------------------------------------- transfer function and SBP

def synthesize_transfer_function(geom: SystemGeometry, conjugate: bool = False) -> np.ndarray:
    """Binary 3D support of all illumination-shifted caps (FFT order).

    Each cap point minus each illumination vector is deposited on the nearest
    grid voxel. With ``conjugate=True`` the point reflection ``k -> -k`` is
    added, i.e. the support a real-valued object's spectrum is known on.
    """
    cap = ewald_cap(geom)
    kill = illumination_wavevectors(geom)
    H = np.zeros(geom.shape, dtype=bool)
    idx = nearest_flat_indices(geom, cap, kill)
    H.reshape(-1)[idx[:, cap.mask]] = True
    if conjugate:
        H |= reflect(H)
    return H


def reflect(a: np.ndarray) -> np.ndarray:
    """``a(-k)`` for an FFT-ordered array."""
    return np.roll(a[::-1, ::-1, ::-1], 1, axis=(0, 1, 2))


def filter_through_transfer_function(V: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Inverse 3D transform of ``FT(V) * H``: what the system can observe of ``V``."""
    V = np.asarray(V)
    if V.shape != H.shape:
        raise ValueError(f"shape mismatch: volume {V.shape} vs transfer function {H.shape}")
    return np.fft.ifftn(np.fft.fftn(V) * H)


def compute_sbp(geom: SystemGeometry, fov_2d: float, axial_range: float, H=None) -> float:
    """3D space-bandwidth product in voxels.

    ``fov_2d`` is the lateral field of view (µm²) and ``axial_range`` the
    axial extent (µm). The k-space volume is the occupied fraction of the grid
    times the grid's k-volume; the product with the spatial volume is divided
    by (2π)³.
    """
    if axial_range <= 0:
        raise ValueError("axial range must be positive")
    if H is None:
        H = synthesize_transfer_function(geom)
    k_volume = np.prod([2 * np.pi / d for d in geom.spacing]) * np.count_nonzero(H) / H.size
    return float(k_volume * fov_2d * axial_range / (2 * np.pi) ** 3)


def missing_cone_half_angle(geom: SystemGeometry) -> float:
    """Half-angle (rad) of the empty cone around the kz axis.

    Chords between a cap point at polar angle a and an illumination point at
    polar angle b tilt by at most (a + b) / 2 from the lateral plane, so no
    support lies within π/2 minus the mean of the two extreme angles.
    """
    a = np.arcsin(geom.na_img / geom.n0)
    b = np.arcsin(geom.na_ill / geom.n0)
    return float(np.pi / 2 - (a + b) / 2)
