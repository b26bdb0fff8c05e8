"""Reconstruction driver: Adam, LED batching, divergence guard, spatial patching and stitching."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dip import DipNetwork
from .forward import ForwardModel, apodize_data, potential_per_ri_contrast
from .geometry import SystemGeometry, bright_field, illumination_wavevectors
from .io import LedStack, save_checkpoint
from .objective import LossConfig, ReconstructionState, total_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the guard has used up its restore budget."""


def _real_view(a: np.ndarray) -> np.ndarray:
    return a.view(np.float64) if np.iscomplexobj(a) else a


# ---------------------------------------------------------------- Adam

class Adam:
    """Adam over a dict of tensors, updated in place.

    Complex parameters are treated as pairs of real parameters.
    ``lr_scale`` maps parameter names to multipliers of the base rate.
    """

    def __init__(self, params: dict, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, lr_scale: Optional[dict] = None):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_scale = dict(lr_scale or {})
        self.step_count = 0
        self.m = {k: np.zeros_like(_real_view(p.data)) for k, p in params.items()}
        self.v = {k: np.zeros_like(_real_view(p.data)) for k, p in params.items()}

    def step(self, grads: dict) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k}")
        self.step_count += 1
        t = self.step_count
        b1c = 1 - self.beta1 ** t
        b2c = 1 - self.beta2 ** t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            g = _real_view(np.ascontiguousarray(np.asarray(g, dtype=p.data.dtype)))
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            lr = self.lr * self.lr_scale.get(k, 1.0)
            _real_view(p.data)[...] -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = state["step"]
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def adam_step(opt: Adam, grads: dict) -> dict:
    """Apply one Adam update and return the (in-place updated) parameters."""
    opt.step(grads)
    return opt.params


# ---------------------------------------------------------------- LED batching

def led_batches(n_led: int, batch_size: Optional[int], rng: np.random.Generator) -> list:
    """Disjoint cover of ``range(n_led)``; reshuffled on every call unless full-batch."""
    if batch_size is None or batch_size >= n_led:
        return [np.arange(n_led)]
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    perm = rng.permutation(n_led)
    return np.array_split(perm, -(-n_led // batch_size))


# ---------------------------------------------------------------- divergence guard

class DivergenceGuard:
    """Checkpoint-and-anneal protection against sudden loss blow-ups.

    A loss that is non-finite, or exceeds ``threshold`` times the mean of the
    last ``window`` accepted losses (once the window is full), restores the
    last checkpoint of the parameters and optimiser moments and multiplies
    the learning rate by ``anneal``.
    """

    def __init__(self, window: int = 10, threshold: float = 3.0, anneal: float = 0.9,
                 checkpoint_every: int = 50, max_restores: int = 50):
        if window < 1:
            raise ValueError("window must be >= 1")
        if not 0 < anneal < 1:
            raise ValueError("anneal factor must lie in (0, 1)")
        self.window = deque(maxlen=window)
        self.threshold = threshold
        self.anneal = anneal
        self.checkpoint_every = checkpoint_every
        self.max_restores = max_restores
        self.n_restores = 0
        self.checkpoint: Optional[dict] = None
        self._accepted = 0

    def save(self, params: dict, opt: Optional[Adam]) -> None:
        self.checkpoint = {"params": {k: p.data.copy() for k, p in params.items()},
                           "adam": opt.state_dict() if opt is not None else None}

    def restore(self, params: dict, opt: Optional[Adam]) -> None:
        for k, p in params.items():
            p.data = self.checkpoint["params"][k].copy()
        if opt is not None:
            opt.params = params
            if self.checkpoint["adam"] is not None:
                opt.load_state_dict(self.checkpoint["adam"])

    def observe(self, loss: float, params: dict, opt: Optional[Adam] = None) -> str:
        """Return ``"continue"`` or ``"restore"`` (after restoring and annealing)."""
        bad = not np.isfinite(loss)
        if not bad and len(self.window) == self.window.maxlen:
            bad = loss / np.mean(self.window) > self.threshold
        if bad and self.checkpoint is not None:
            self.n_restores += 1
            if self.n_restores > self.max_restores:
                raise DivergenceError(f"loss diverged {self.n_restores} times; last value {loss:.4g}")
            self.restore(params, opt)
            if opt is not None:
                opt.lr *= self.anneal
            return "restore"
        if bad:
            raise DivergenceError(f"non-finite loss {loss} before any checkpoint")
        if self._accepted % self.checkpoint_every == 0:
            self.save(params, opt)
        self._accepted += 1
        self.window.append(loss)
        return "continue"


def divergence_guard(guard: DivergenceGuard, loss: float, params: dict, opt: Optional[Adam] = None) -> str:
    return guard.observe(loss, params, opt)


# ---------------------------------------------------------------- spatial patching and stitching

@dataclass
class PatchPlan:
    """Square lateral patches of ``patch`` pixels inside a ``fov`` = (nx, ny) grid."""

    patch: int
    fov: tuple
    depad: Optional[int] = None

    def __post_init__(self):
        if self.patch < 1 or self.patch > min(self.fov):
            raise ValueError(f"patch {self.patch} does not fit in field of view {self.fov}")
        if self.depad is None:
            self.depad = self.patch // 8
        if 2 * self.depad >= self.patch:
            raise ValueError("depad margin leaves an empty patch")

    def sample_offset(self, rng) -> tuple:
        """Uniform top-left corner in ``[0, N − P]²`` (optimisation patches)."""
        return tuple(int(rng.integers(0, n - self.patch + 1)) for n in self.fov)

    def sample_stitch_offset(self, rng) -> tuple:
        """Corner of a patch centred on a uniform FOV pixel, clamped inside the FOV."""
        out = []
        for n in self.fov:
            c = int(rng.integers(0, n))
            out.append(int(np.clip(c - self.patch // 2, 0, n - self.patch)))
        return tuple(out)

    def crop(self, offset) -> tuple:
        return tuple(slice(o, o + self.patch) for o in offset)

    def weight(self, offset) -> np.ndarray:
        """Positive cosine taper over the retained (depadded) part of a patch."""
        ws = []
        for o, n in zip(offset, self.fov):
            lo = 0 if o == 0 else self.depad
            hi = self.patch if o + self.patch == n else self.patch - self.depad
            w = np.zeros(self.patch)
            L = hi - lo
            i = np.arange(L)
            w[lo:hi] = 0.5 - 0.5 * np.cos(2 * np.pi * (i + 0.5) / L)
            ws.append(w)
        return np.outer(ws[0], ws[1])


def patch_geometry(geom: SystemGeometry, plan: PatchPlan) -> SystemGeometry:
    return geom.replace(shape=(plan.patch, plan.patch, geom.nz))


def spatial_patch_iteration(plan: PatchPlan, state: ReconstructionState, data: LedStack,
                            cfg: LossConfig, forward: ForwardModel, rng, leds=None, offset=None):
    """Loss over one random lateral patch of the reconstruction and the matching data.

    ``forward`` must be built on :func:`patch_geometry`. Returns ``(loss, offset)``.
    """
    if offset is None:
        offset = plan.sample_offset(rng)
    sx, sy = plan.crop(offset)
    sel = np.arange(data.n_leds) if leds is None else np.asarray(leds)
    target = data.images[sel][:, sx, sy]
    if forward.apodize and not cfg.phase_sensitive:
        target = apodize_data(target, forward.geom)
    loss = total_loss(state, target, cfg, forward, leds=sel, crop=(sx, sy))
    return loss, offset


def stitch_patches(generate: Callable, plan: PatchPlan, m: int, rng) -> np.ndarray:
    """Weighted superposition of ``m`` random patches produced by ``generate(crop)``.

    Weights are accumulated from all offsets first, so each patch enters as
    ``(w / Σw) · patch``; the result does not depend on the draw order beyond
    float rounding, and a single full-FOV patch is returned bitwise unchanged.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    offsets = [plan.sample_stitch_offset(rng) for _ in range(m)]
    wsum = np.zeros(plan.fov)
    for o in offsets:
        sx, sy = plan.crop(o)
        wsum[sx, sy] += plan.weight(o)
    if np.any(wsum <= 0):
        raise ValueError(f"insufficient coverage: {int(np.sum(wsum <= 0))} pixels received no patch")
    out = None
    for o in offsets:
        sx, sy = plan.crop(o)
        p = np.asarray(generate((sx, sy)))
        if out is None:
            out = np.zeros(plan.fov + p.shape[2:], dtype=p.dtype)
        w = plan.weight(o) / wsum[sx, sy]
        out[sx, sy] += w.reshape(w.shape + (1,) * (p.ndim - 2)) * p
    return out


def stochastic_stitch(state: ReconstructionState, plan: PatchPlan, m: int = 1000, rng=None) -> np.ndarray:
    """Stitch the state's spatial variable (``V`` or ``δn``) from ``m`` random patches."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def generate(crop):
        if state.net is not None:
            return state.net.generate(crop).data
        return state.variables(crop)[1].data

    return stitch_patches(generate, plan, m, rng)


# ---------------------------------------------------------------- driver

@dataclass
class Schedule:
    """Optimisation settings.

    ``lr`` defaults to 1e-2 for voxels and 1e-3 for the deep prior.
    ``batch_leds=None`` uses every LED each iteration. ``patch`` enables
    spatial patching (multi-slice only).
    """

    iterations: int = 500
    lr: Optional[float] = None
    batch_leds: Optional[int] = None
    patch: Optional[int] = None
    seed: int = 0
    optimize_u0: bool = True
    optimize_pupil: bool = False
    guard: bool = True
    guard_window: int = 10
    guard_threshold: float = 3.0
    guard_anneal: float = 0.9
    checkpoint_every: int = 50
    max_restores: int = 50
    dip_channels: tuple = (16, 32, 64, 128)
    dip_out_features: int = 4
    dip_output_scale: Optional[float] = None
    stitch_patches: int = 1000
    apodize: bool = True
    init_volume: Optional[np.ndarray] = None
    init_u0: Optional[np.ndarray] = None
    checkpoint_dir: Optional[str] = None
    callback: Optional[Callable] = field(default=None, repr=False)


@dataclass
class ReconstructionResult:
    ri: np.ndarray
    state: ReconstructionState
    trace: list
    restores: int


def initial_u0(data: LedStack, geom: SystemGeometry, model: str) -> np.ndarray:
    """Mean amplitude of each raw image.

    Born and Rytov keep a zero background for dark-field LEDs, whose
    unscattered light misses the pupil. Multi-slice dark-field LEDs start from
    the median bright-field value, since there ``u0`` scales the whole field.
    """
    amp = np.sqrt(np.clip(np.real(data.images), 0, None)).mean(axis=(1, 2))
    if np.iscomplexobj(data.images):
        amp = np.abs(data.images).mean(axis=(1, 2))
    bright = bright_field(geom, illumination_wavevectors(geom))
    if model == "multislice":
        fill = np.median(amp[bright]) if bright.any() else 1.0
        return np.where(bright, amp, fill)
    return np.where(bright, amp, 0.0)


def build_state(data: LedStack, geom: SystemGeometry, cfg: LossConfig, schedule: Schedule) -> ReconstructionState:
    u0 = schedule.init_u0 if schedule.init_u0 is not None else initial_u0(data, geom, cfg.model)
    u0 = Tensor(np.array(u0, dtype=float), requires_grad=schedule.optimize_u0, name="u0")
    pupil = None
    if schedule.optimize_pupil:
        pupil = Tensor(np.zeros((geom.nx, geom.ny)), requires_grad=True, name="pupil_phase")
    if cfg.use_dip:
        scale = schedule.dip_output_scale
        if scale is None:
            scale = 1e-3
            if cfg.model != "multislice":
                scale *= potential_per_ri_contrast(geom.n0, geom.wavelength)
        net = DipNetwork(geom.shape, schedule.dip_channels, schedule.dip_out_features,
                         output_scale=scale, seed=schedule.seed)
        return ReconstructionState(geom, cfg.model, u0, net=net, pupil_phase=pupil)
    init = schedule.init_volume
    vol = np.zeros(geom.shape, complex) if init is None else np.array(init, dtype=complex)
    if vol.shape != geom.shape:
        raise ValueError(f"initial volume shape {vol.shape} does not match grid {geom.shape}")
    return ReconstructionState(geom, cfg.model, u0, volume=Tensor(vol, requires_grad=True, name="volume"),
                               pupil_phase=pupil)


def _check_data(data: LedStack, geom: SystemGeometry, cfg: LossConfig):
    if data.images.shape[1:] != (geom.nx, geom.ny):
        raise ValueError(f"image size {data.images.shape[1:]} does not match grid {(geom.nx, geom.ny)}")
    kill = illumination_wavevectors(geom).as_array()
    if data.kill.shape != kill.shape or not np.allclose(data.kill, kill, rtol=1e-9, atol=1e-9):
        raise ValueError("illumination wavevectors of the data do not match the geometry")
    if cfg.phase_sensitive != np.iscomplexobj(data.images):
        raise ValueError("phase-sensitive reconstruction needs complex field data (and vice versa)")


def reconstruct(data: LedStack, geom: SystemGeometry, cfg: LossConfig,
                schedule: Optional[Schedule] = None) -> ReconstructionResult:
    """Minimise the configured objective and return the RI volume.

    Born/Rytov reconstructions convert the recovered potential to RI with the
    principal-branch inverse; multi-slice returns ``n0 + δn``.
    """
    schedule = schedule or Schedule()
    _check_data(data, geom, cfg)
    rng = np.random.default_rng(schedule.seed)
    state = build_state(data, geom, cfg, schedule)
    params = state.parameters()
    lr = schedule.lr if schedule.lr is not None else (1e-3 if cfg.use_dip else 1e-2)
    opt = Adam(params, lr)
    guard = (DivergenceGuard(schedule.guard_window, schedule.guard_threshold, schedule.guard_anneal,
                             schedule.checkpoint_every, schedule.max_restores)
             if schedule.guard else None)

    patched = schedule.patch is not None and schedule.patch < min(geom.nx, geom.ny)
    if schedule.patch is not None and cfg.model != "multislice":
        raise ValueError("spatial patching requires the multi-slice model")
    if patched:
        plan = PatchPlan(schedule.patch, (geom.nx, geom.ny))
        fm = ForwardModel(patch_geometry(geom, plan), cfg.model, apodize=schedule.apodize)
    else:
        fm = ForwardModel(geom, cfg.model, apodize=schedule.apodize)
        target = data.images
        if cfg.model == "multislice" and schedule.apodize and not cfg.phase_sensitive:
            target = apodize_data(target, geom)

    u0_mask = None
    if cfg.model != "multislice" and "u0" in params:
        u0_mask = bright_field(geom, illumination_wavevectors(geom)).astype(float)

    trace = []
    batches: list = []
    for it in range(schedule.iterations):
        if not batches:
            batches = led_batches(data.n_leds, schedule.batch_leds, rng)
        leds = batches.pop(0)
        with ad.Tape() as tape:
            if patched:
                loss, _ = spatial_patch_iteration(plan, state, data, cfg, fm, rng, leds)
            else:
                sub = leds if len(leds) < data.n_leds else None
                loss = total_loss(state, target[leds] if sub is not None else target, cfg, fm, leds=sub)
        value = float(loss.data)
        action = "continue"
        if guard is not None:
            action = guard.observe(value, params, opt)
        trace.append({"iteration": it, "loss": value, "lr": opt.lr, "restored": action == "restore"})
        if schedule.callback is not None:
            schedule.callback(it, value, state)
        if action == "restore":
            continue
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        grads = tape.backward(loss)
        grads = {k: grads[p] for k, p in params.items()}
        if u0_mask is not None:
            grads["u0"] = grads["u0"] * u0_mask
        opt.step(grads)
        if schedule.checkpoint_dir and (it + 1) % schedule.checkpoint_every == 0:
            save_checkpoint(Path(schedule.checkpoint_dir) / f"iter_{it + 1:06d}",
                            {k: p.data for k, p in params.items()}, {"iteration": it + 1})
        if it % 50 == 0:
            log.debug("iteration %d loss %.6g", it, value)

    if patched and state.net is not None:
        ri = state.refractive_index(stochastic_stitch(state, plan, schedule.stitch_patches, rng))
        ri = np.asarray(ri.data if isinstance(ri, Tensor) else ri)
    else:
        ri = state.result()
    return ReconstructionResult(ri, state, trace, guard.n_restores if guard else 0)
