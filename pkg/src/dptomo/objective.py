"""Data-fidelity losses, regularisers and the combined reconstruction objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dip import DipNetwork
from .forward import MODELS, ForwardModel, inverse_spectrum, ri_from_scattering_potential, spectrum
from .geometry import SystemGeometry


@dataclass
class LossConfig:
    """Weights and switches of the objective ``E + λ_TV R_TV + λ_+ R_+``."""

    lambda_tv: float = 0.0
    lambda_pos: float = 0.0
    use_dip: bool = False
    model: str = "born"
    phase_sensitive: bool = False
    tv_eps: float = 1e-12

    def __post_init__(self):
        for name in ("lambda_tv", "lambda_pos", "tv_eps"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def amplitude_mse(I_pred, I_data):
    """Mean squared difference of square-root intensities."""
    if _values(I_pred).shape != _values(I_data).shape:
        raise ValueError("prediction and data shapes differ")
    for name, I in (("predicted", I_pred), ("data", I_data)):
        if np.any(_values(I) < 0):
            raise ValueError(f"negative {name} intensity")
    d = ad.sub(ad.sqrt(I_pred), ad.sqrt(I_data))
    return ad.mean(ad.mul(d, d))


def field_mse(f_pred, f_data):
    """Mean squared modulus of the complex field difference."""
    if _values(f_pred).shape != _values(f_data).shape:
        raise ValueError("prediction and data shapes differ")
    return ad.mean(ad.abs2(ad.sub(f_pred, f_data)))


def tv_isotropic(S, eps: float = 1e-12, smooth: bool = True):
    """Isotropic total variation of the real and imaginary parts, summed.

    Forward differences with a replicated far boundary. ``smooth=True`` uses
    ``sqrt(|∇S|² + eps²)``; otherwise the plain root with zero gradient at
    zero difference.
    """
    S = ad.as_tensor(S)
    parts = [ad.real(S), ad.imag(S)] if S.is_complex else [S]
    total = None
    for part in parts:
        g2 = None
        for axis in range(part.ndim):
            if part.shape[axis] < 2:
                continue
            d = ad.forward_diff(part, axis)
            g2 = ad.mul(d, d) if g2 is None else ad.add(g2, ad.mul(d, d))
        if g2 is None:
            continue
        if smooth:
            g2 = ad.add(g2, eps ** 2)
        tv = ad.sum(ad.sqrt(g2))
        total = tv if total is None else ad.add(total, tv)
    return total if total is not None else ad.as_tensor(np.float64(0.0))


def positivity_penalty(n, n0: float):
    """``Σ min(Re n − n0, 0)²``."""
    r = ad.minimum(ad.sub(ad.real(ad.as_tensor(n)), n0), 0.0)
    return ad.sum(ad.mul(r, r))


# ---------------------------------------------------------------- reconstruction state

@dataclass
class ReconstructionState:
    """Optimisable quantities of a reconstruction.

    Exactly one of ``volume`` (voxel parameterisation) and ``net`` (deep
    prior) is set. For ``born``/``rytov`` the voxel variable is the spectrum
    ``Ṽ``; for ``multislice`` it is ``δn``. The network, when used, generates
    the spatial ``V`` or ``δn`` directly.
    """

    geom: SystemGeometry
    model: str
    u0: Tensor
    volume: Optional[Tensor] = None
    net: Optional[DipNetwork] = None
    pupil_phase: Optional[Tensor] = None

    def __post_init__(self):
        if (self.volume is None) == (self.net is None):
            raise ValueError("exactly one of volume and net must be given")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")

    @property
    def uses_dip(self) -> bool:
        return self.net is not None

    def parameters(self) -> dict:
        """Trainable tensors by name."""
        out = {}
        if self.volume is not None:
            out["volume"] = self.volume
        else:
            out.update({f"net.{k}": v for k, v in self.net.params.items()})
        if self.u0.requires_grad:
            out["u0"] = self.u0
        if self.pupil_phase is not None and self.pupil_phase.requires_grad:
            out["pupil_phase"] = self.pupil_phase
        return out

    def variables(self, crop=None):
        """``(S_model, S_spatial)``: forward-model input and its spatial form.

        ``crop`` selects a lateral ``(slice_x, slice_y)`` patch (multi-slice only).
        """
        linear = self.model != "multislice"
        if crop is not None and linear:
            raise ValueError("spatial patching is only supported for the multi-slice model")
        if self.net is not None:
            spatial = self.net.generate(crop)
            return (spectrum(spatial) if linear else spatial), spatial
        if linear:
            return self.volume, inverse_spectrum(self.volume)
        vol = self.volume if crop is None else self.volume[crop[0], crop[1], :]
        return vol, vol

    def refractive_index(self, spatial):
        """RI volume from the spatial model variable."""
        g = self.geom
        if self.model == "multislice":
            return ad.add(spatial, g.n0)
        return ri_from_scattering_potential(spatial, g.n0, g.wavelength)

    def result(self) -> np.ndarray:
        """Final RI volume (complex) from the current parameters."""
        _, spatial = self.variables()
        return _values(self.refractive_index(spatial.data)).copy()


def total_loss(state: ReconstructionState, data, cfg: LossConfig, forward: ForwardModel,
               leds=None, crop=None, return_terms: bool = False):
    """``E + λ_TV R_TV + λ_+ R_+`` evaluated at the state's current parameters.

    Parameters
    ----------
    data : LedStack or ndarray
        Intensities (or complex fields when ``cfg.phase_sensitive``) for the
        selected ``leds``, shaped like the forward prediction.
    forward : ForwardModel
        Operator matching the (patch) geometry.
    leds : index array, optional
        LED subset; ``data`` must already be restricted to it.
    crop : tuple of slices, optional
        Lateral patch of the reconstruction (multi-slice).
    """
    target = data.images if hasattr(data, "images") else np.asarray(data)
    S_model, spatial = state.variables(crop)
    sel = np.arange(forward.n_leds) if leds is None else np.atleast_1d(np.asarray(leds))
    u0 = state.u0 if leds is None else state.u0[sel]
    pred = forward.predict(S_model, u0, sel, state.pupil_phase, cfg.phase_sensitive)
    E = field_mse(pred, target) if cfg.phase_sensitive else amplitude_mse(pred, target)
    loss = E
    terms = {"data": float(E.data)}
    if cfg.lambda_tv > 0:
        tv = tv_isotropic(spatial, cfg.tv_eps)
        loss = ad.add(loss, ad.mul(tv, cfg.lambda_tv))
        terms["tv"] = float(tv.data)
    if cfg.lambda_pos > 0:
        pos = positivity_penalty(state.refractive_index(spatial), state.geom.n0)
        loss = ad.add(loss, ad.mul(pos, cfg.lambda_pos))
        terms["positivity"] = float(pos.data)
    return (loss, terms) if return_terms else loss
