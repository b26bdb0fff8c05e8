import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from dptomo import autodiff as ad
from dptomo import forward as fw
from dptomo import geometry as g
from helpers import check_gradient, random_like

GRAD_TOL = 1e-5


def geom_for(shape=(8, 8, 8), spacing=(0.3, 0.3, 0.3), na_ill=0.4, na_img=0.5, na_step=0.2,
             focus_offset=0.0, n0=1.33, wavelength=0.632):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", g.NyquistWarning)
        return g.SystemGeometry.with_na_grid(wavelength=wavelength, n0=n0, na_ill=na_ill, na_img=na_img,
                                             shape=shape, spacing=spacing, na_step=na_step,
                                             focus_offset=focus_offset)


def geom_with_kx(kx_pixels, shape=(32, 32, 1), spacing=(0.2, 0.2, 0.2), **kw):
    """Single LED whose lateral wavevector sits exactly on the k-grid."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", g.NyquistWarning)
        base = g.SystemGeometry(0.632, 1.33, 0.3, kw.pop("na_img", 0.5), shape, spacing, **kw)
    kx = kx_pixels * base.dk[0]
    s = kx / base.k_medium
    x = -base.led_distance * s / np.sqrt(1 - s ** 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", g.NyquistWarning)
        return base.replace(led_xy=np.array([[x, 0.0]]))


# ---------------------------------------------------------------- potentials and spectra

def test_scattering_potential_scalar():
    V = fw.scattering_potential_from_ri(np.array(1.525), 1.515, 0.632)
    assert float(V) == pytest.approx(0.2391, abs=2e-4)
    assert fw.scattering_potential_from_ri(np.full(3, 1.33), 1.33, 0.5).tolist() == [0, 0, 0]


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(-0.5, 0.5), st.floats(1.0, 1.6))
def test_ri_roundtrip(re, im, n0):
    n = np.array([re + 1j * im])
    assume(abs(n[0]) >= 1e-3)  # sqrt of a cancelling difference is ill-conditioned at n = 0
    back = fw.ri_from_scattering_potential(fw.scattering_potential_from_ri(n, n0, 0.6), n0, 0.6)
    if re == 0 and im < 0:
        return  # branch cut: principal root maps the negative imaginary axis to +i|im|
    np.testing.assert_allclose(back, n, atol=1e-10)


def test_potential_per_ri_contrast_is_derivative():
    h = 1e-6
    num = (fw.scattering_potential_from_ri(1.33 + h, 1.33, 0.632)
           - fw.scattering_potential_from_ri(1.33 - h, 1.33, 0.632)) / (2 * h)
    assert fw.potential_per_ri_contrast(1.33, 0.632) == pytest.approx(num, rel=1e-8)


def test_spectrum_properties():
    rng = np.random.default_rng(0)
    V = rng.standard_normal((6, 8, 5))
    Vt = fw.spectrum(V).data
    assert np.linalg.norm(Vt) == pytest.approx(np.linalg.norm(V), rel=1e-10)
    np.testing.assert_allclose(g.reflect(Vt), np.conj(Vt), atol=1e-12)
    np.testing.assert_allclose(fw.inverse_spectrum(Vt).data, V, atol=1e-12)
    delta = np.zeros((6, 8, 5))
    delta[3, 4, 2] = 1.0  # the centre voxel
    Dt = fw.spectrum(delta).data
    np.testing.assert_allclose(Dt, 1 / np.sqrt(delta.size), atol=1e-14)


# ---------------------------------------------------------------- background, pupil

def test_background_field_examples():
    geom = geom_with_kx(0)
    kill = g.illumination_wavevectors(geom)
    ub = fw.background_field(np.array([2.5]), kill, geom)
    np.testing.assert_allclose(ub, 2.5)
    tilted = g.IlluminationWavevectors(np.array([2 * np.pi / (8 * geom.dx)]), np.zeros(1), np.ones(1))
    ub = fw.background_field(np.ones(1), tilted, geom)[0]
    np.testing.assert_allclose(np.abs(ub), 1.0)
    np.testing.assert_allclose(ub[8:, :], ub[:-8, :], atol=1e-12)
    assert not np.allclose(ub[4:, :], ub[:-4, :])


def test_pupil_radius():
    geom = geom_with_kx(0)
    p = fw.make_pupil(geom)
    kx, ky = geom.k_grid_2d()
    np.testing.assert_array_equal(p.amplitude > 0, np.hypot(kx, ky) <= geom.k * geom.na_img)


# ---------------------------------------------------------------- Born

def test_born_zero_potential_gives_zero_field():
    geom = geom_for()
    u = fw.born_scattered_field(np.zeros(geom.shape, complex), geom)
    assert np.all(u.data == 0)


def test_born_identity_pupil_matches_unpupiled():
    geom = geom_for()
    rng = np.random.default_rng(1)
    Vt = random_like(rng, geom.shape, True)
    a = fw.born_scattered_field(Vt, geom).data
    b = fw.born_scattered_field(Vt, geom, fw.make_pupil(geom, phase=np.zeros((8, 8)))).data
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_born_impulse_matches_direct_summation():
    """Direct evaluation of the sampled diffraction formula on an 8x8 grid."""
    geom = geom_for(shape=(8, 8, 8), focus_offset=0.4)
    cap = g.ewald_cap(geom)
    kill = g.illumination_wavevectors(geom)
    K = geom.k_medium
    target = None
    # pick a grid voxel hit by the first LED's cap
    for i in range(8):
        for j in range(8):
            if cap.mask[i, j]:
                off = [(cap.kx[i, j] - kill.kx[0]) / geom.dk[0], (cap.ky[i, j] - kill.ky[0]) / geom.dk[1],
                       (cap.kz[i, j] - kill.kz[0]) / geom.dk[2]]
                target = tuple(int(round(o)) % n for o, n in zip(off, geom.shape))
                break
        if target:
            break
    Vt = np.zeros(geom.shape, complex)
    Vt[target] = 0.7 - 0.2j
    u = fw.born_scattered_field(Vt, geom).data
    x = (np.arange(8) - 4) * geom.dx
    z_ref = -geom.thickness / 2 + (geom.nz // 2 + 1) * geom.dz
    for p in range(len(kill)):
        ref = np.zeros((8, 8), complex)
        for i in range(8):
            for j in range(8):
                qx, qy = cap.kx[i, j], cap.ky[i, j]
                if qx ** 2 + qy ** 2 > (geom.k * geom.na_img) ** 2:
                    continue
                qz = np.sqrt(K ** 2 - qx ** 2 - qy ** 2)
                off = [(qx - kill.kx[p]) / geom.dk[0], (qy - kill.ky[p]) / geom.dk[1], (qz - kill.kz[p]) / geom.dk[2]]
                idx = tuple(int(round(o)) % n for o, n in zip(off, geom.shape))
                if idx != target:
                    continue
                amp = (2j * np.pi * geom.dz * np.sqrt(8) * Vt[target] / qz
                       * np.exp(1j * (qz - kill.kz[p]) * (geom.focus_offset - z_ref)))
                for a in range(8):
                    for b in range(8):
                        ref[a, b] += amp * np.exp(1j * (qx * x[a] + qy * x[b])) / 8
        np.testing.assert_allclose(u[p], ref, atol=1e-12)
    assert np.abs(u).max() > 0


def test_born_trilinear_equals_nearest_on_grid_points():
    geom = g.SystemGeometry(0.632, 1.33, 0.0, 0.5, (8, 8, 8), (0.3, 0.3, 0.3))
    rng = np.random.default_rng(2)
    Vt = random_like(rng, geom.shape, True)
    a = fw.born_scattered_field(Vt, geom, sampling="nearest").data
    b = fw.born_scattered_field(Vt, geom, sampling="trilinear").data
    # on-axis illumination puts cap points on lateral grid nodes; trilinear still blends in kz
    assert np.isfinite(b).all() and a.shape == b.shape
    with pytest.raises(ValueError, match="sampling"):
        fw.born_scattered_field(Vt, geom, sampling="cubic")


def test_born_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        fw.born_scattered_field(np.zeros((4, 4, 4)), geom_for())


def test_born_rytov_intensity_examples():
    rng = np.random.default_rng(3)
    ub = np.exp(1j * rng.uniform(0, 6, (2, 4, 4))) * 1.5
    np.testing.assert_allclose(fw.born_intensity(ub, np.zeros_like(ub)).data, 2.25)
    np.testing.assert_allclose(fw.rytov_intensity(ub, np.zeros_like(ub)).data, 2.25)
    np.testing.assert_allclose(fw.born_intensity(ub, -ub).data, 0, atol=1e-15)
    with pytest.raises(ValueError, match="Rytov undefined"):
        fw.rytov_intensity(np.zeros((1, 2, 2)), np.ones((1, 2, 2)))


def test_rytov_born_second_order_agreement():
    rng = np.random.default_rng(4)
    ub = np.exp(1j * rng.uniform(0, 6, (3, 6, 6)))
    u = random_like(rng, (3, 6, 6), True)
    err = []
    for eps in (1e-2, 1e-3):
        d = fw.rytov_intensity(ub, eps * u).data - fw.born_intensity(ub, eps * u).data
        err.append(np.abs(d).max())
    assert 80 < err[0] / err[1] < 120


def test_phase_sensitive_examples():
    rng = np.random.default_rng(5)
    ub = np.exp(1j * rng.uniform(0, 6, (2, 4, 4)))
    u = 0.1 * random_like(rng, (2, 4, 4), True)
    np.testing.assert_allclose(fw.phase_sensitive_fields(ub, 0 * u).data, ub)
    for theta in (0.0, 0.7, np.pi / 2):
        f = fw.phase_sensitive_fields(ub, u, theta).data
        np.testing.assert_allclose(np.abs(f) ** 2, fw.born_intensity(ub, u).data, rtol=1e-12)
        fr = fw.phase_sensitive_fields(ub, u, theta, "rytov").data
        np.testing.assert_allclose(np.abs(fr) ** 2, fw.rytov_intensity(ub, u).data, rtol=1e-12)
    f0 = fw.phase_sensitive_fields(ub, u, 0.0).data
    np.testing.assert_allclose(fw.phase_sensitive_fields(ub, u, np.pi / 2).data, 1j * f0, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * np.pi))
def test_born_intensity_global_phase_invariance(phi):
    rng = np.random.default_rng(6)
    ub = random_like(rng, (1, 4, 4), True)
    u = random_like(rng, (1, 4, 4), True)
    r = np.exp(1j * phi)
    np.testing.assert_allclose(fw.born_intensity(ub * r, u * r).data, fw.born_intensity(ub, u).data,
                               rtol=1e-12)


# ---------------------------------------------------------------- Fresnel kernel and multi-slice

def test_fresnel_kernel_examples():
    geom = geom_with_kx(0)
    kx, ky = geom.k_grid_2d()
    prop = kx ** 2 + ky ** 2 <= geom.k_medium ** 2
    assert prop.sum() > 100 and not prop.all()
    np.testing.assert_array_equal(fw.fresnel_kernel(0.0, geom.k, geom.n0, kx, ky)[prop], 1)
    for z in (-3.0, 0.5, 7.0):
        D = fw.fresnel_kernel(z, geom.k, geom.n0, kx, ky)
        assert D[0, 0] == 1
        np.testing.assert_allclose(np.abs(D[prop]), 1, atol=1e-14)


def test_fresnel_kernel_zeroes_evanescent():
    kx = np.array([[0.0, 20.0]])
    D = fw.fresnel_kernel(1.0, 2 * np.pi / 0.632, 1.33, kx, np.zeros_like(kx))
    assert D[0, 1] == 0


def test_multislice_background_intensity():
    geom = geom_with_kx(2, shape=(16, 16, 4), focus_offset=0.4)
    I = fw.multislice_forward(np.zeros(geom.shape), geom, u0=np.array([1.7]), apodize=False).data
    np.testing.assert_allclose(I, 1.7 ** 2, rtol=1e-12)


def test_multislice_energy_preserved_every_slice():
    geom = geom_with_kx(2, shape=(16, 16, 5), spacing=(0.4, 0.4, 0.4))  # no evanescent grid points
    pupil = fw.Pupil(np.ones((16, 16)))
    _, slices = fw.multislice_field(np.zeros(geom.shape), geom, pupil, u0=1.0, apodize=True,
                                    return_slices=True)
    e0 = np.linalg.norm(slices[0].data)
    for s in slices:
        assert np.linalg.norm(s.data) == pytest.approx(e0, rel=1e-10)


def test_multislice_rejects_bad_shape():
    with pytest.raises(ValueError, match="shape"):
        fw.multislice_forward(np.zeros((4, 4, 4)), geom_for())


def test_apodization_examples():
    geom = geom_with_kx(0, shape=(33, 33, 2))
    kill = g.illumination_wavevectors(geom)
    w = fw.gaussian_apodization(geom, kill)[0]
    assert w[16, 16] == 1.0
    sigma = 0.4 * 33 * geom.dx
    x, _ = geom.coords_2d()
    np.testing.assert_allclose(w[16, 16 + 5], np.exp(-(x[16 + 5, 16] ** 2) / (2 * sigma ** 2)))
    assert np.exp(-0.5) == pytest.approx(0.6065, abs=1e-4)
    # 45 degrees with focus + half thickness = 10 um
    tilted = g.IlluminationWavevectors(np.array([1.0]), np.array([0.0]), np.array([1.0]))
    geom10 = geom.replace(focus_offset=10.0 - geom.thickness / 2)
    xp, yp = fw.apodization_offset(geom10, tilted)
    assert xp[0] == pytest.approx(10.0) and yp[0] == 0
    with pytest.raises(ValueError):
        fw.apodization_offset(geom, g.IlluminationWavevectors(np.ones(1), np.zeros(1), np.zeros(1)))


def _circular_centroid(I, geom):
    x, _ = geom.coords_2d()
    L = geom.nx * geom.dx
    return np.angle(np.sum(I * np.exp(2j * np.pi * x / L))) * L / (2 * np.pi)


def test_apodized_beam_lands_centred():
    geom = geom_with_kx(6, shape=(64, 64, 8), spacing=(0.2, 0.2, 0.5), focus_offset=2.0, na_img=0.9)
    kill = g.illumination_wavevectors(geom)
    xp, _ = fw.apodization_offset(geom, kill)
    assert abs(xp[0]) > 2 * geom.dx
    I = fw.multislice_forward(np.zeros(geom.shape), geom, apodize=True).data[0]
    assert abs(_circular_centroid(I, geom)) < 0.25 * geom.dx


def test_multislice_born_first_order_fields_agree():
    """Weak object, low NA: both models give the same scattered field to first order."""
    rng = np.random.default_rng(7)
    for kx_pix in (0, 2):
        geom = geom_with_kx(kx_pix, shape=(32, 32, 4), spacing=(0.5, 0.5, 0.5), na_img=0.25,
                            focus_offset=0.3)
        # smooth random RI deviation so its spectrum sits inside the low-NA pupil
        dn = rng.standard_normal(geom.shape)
        dn = np.real(np.fft.ifftn(np.fft.fftn(dn) * np.exp(-np.sum(np.square(
            np.meshgrid(*[np.fft.fftfreq(n) * 8 for n in geom.shape], indexing="ij")), axis=0))))
        dn *= 1e-5 / np.abs(dn).max()
        kill = g.illumination_wavevectors(geom)
        u_ms = fw.multislice_field(dn, geom, apodize=False).data[0]
        z_in = -geom.thickness / 2
        carrier = np.exp(1j * (kill.kz[0] - geom.k_medium) * (geom.focus_offset - z_in))
        ub = fw.background_field(np.ones(1), kill, geom)[0]
        scat_ms = u_ms / carrier - ub
        V = fw.scattering_potential_from_ri(geom.n0 + dn, geom.n0, geom.wavelength)
        u_b = fw.born_scattered_field(fw.spectrum(V).data, geom).data[0]
        rel = np.linalg.norm(scat_ms - u_b) / np.linalg.norm(u_b)
        assert rel < 0.02, (kx_pix, rel)


def test_multislice_born_intensity_quadratic_convergence():
    geom = geom_with_kx(0, shape=(32, 32, 1), spacing=(0.25, 0.25, 0.25))
    geom = geom.replace(focus_offset=geom.dz / 2)
    rng = np.random.default_rng(8)
    pattern = rng.standard_normal(geom.shape)
    diffs = []
    for contrast in (1e-2, 1e-3):
        dn = contrast * pattern
        I_ms = fw.multislice_forward(dn, geom, apodize=False).data
        V = fw.scattering_potential_from_ri(geom.n0 + dn, geom.n0, geom.wavelength)
        model = fw.ForwardModel(geom, "born")
        I_b = model.predict(fw.spectrum(V).data, np.ones(1)).data
        diffs.append(np.linalg.norm(I_ms - I_b) / np.linalg.norm(I_b))
    assert diffs[0] / diffs[1] >= 50


# ---------------------------------------------------------------- ForwardModel and gradients

def test_forward_model_rejects_unknown_model():
    with pytest.raises(ValueError, match="unknown model"):
        fw.ForwardModel(geom_for(), "mie")


def test_forward_model_led_subset_consistent():
    geom = geom_for()
    rng = np.random.default_rng(9)
    Vt = 0.01 * random_like(rng, geom.shape, True)
    model = fw.ForwardModel(geom, "born")
    full = model.predict(Vt, np.ones(geom.n_leds)).data
    sub = model.predict(Vt, np.ones(2), leds=[3, 1]).data
    np.testing.assert_allclose(sub, full[[3, 1]], atol=1e-14)


@pytest.mark.parametrize("model", ["born", "rytov", "multislice"])
@pytest.mark.parametrize("phase_sensitive", [False, True])
def test_forward_model_gradients(model, phase_sensitive):
    geom = geom_for(na_ill=0.2)  # bright-field LEDs so Rytov is defined
    rng = np.random.default_rng(10)
    fm = fw.ForwardModel(geom, model)
    S = 0.05 * random_like(rng, geom.shape, True)
    u0 = 1.0 + 0.1 * rng.random(geom.n_leds)
    phase = 0.1 * rng.standard_normal((8, 8))
    out = fm.predict(S, u0, phase_sensitive=phase_sensitive)
    c = random_like(rng, out.shape, True)

    def loss(S_, u0_, ph_):
        y = fm.predict(S_, u0_, pupil_phase=ph_, phase_sensitive=phase_sensitive)
        return ad.sum(ad.real(ad.mul(y, c)))

    assert check_gradient(loss, [S, u0, phase], rng) <= GRAD_TOL
