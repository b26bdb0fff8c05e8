"""Optional figures; matplotlib is imported only when a plot is requested."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise RuntimeError("plots need matplotlib (pip install 'artifact[plots]')") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def transfer_function_sections(H: np.ndarray, geom, path: Path) -> None:
    """Central kx-ky and kx-kz sections of a binary transfer function."""
    plt = _pyplot()
    Hc = np.fft.fftshift(H)
    kx, ky, kz = (np.fft.fftshift(a) for a in geom.k_axes())
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    ext_xy = [ky[0], ky[-1], kx[0], kx[-1]]
    ext_xz = [kz[0], kz[-1], kx[0], kx[-1]]
    axes[0].imshow(Hc[:, :, geom.nz // 2], extent=ext_xy, origin="lower", cmap="gray")
    axes[0].set(title="kz = 0", xlabel="ky (rad/µm)", ylabel="kx (rad/µm)")
    axes[1].imshow(Hc[:, geom.ny // 2, :], extent=ext_xz, origin="lower", cmap="gray", aspect="auto")
    axes[1].set(title="ky = 0", xlabel="kz (rad/µm)", ylabel="kx (rad/µm)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sbp_curves(rows: list, path: Path) -> None:
    """SBP (gigavoxels, log scale) against illumination NA, one line per imaging NA."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for na_img in sorted({r["na_img"] for r in rows}):
        sel = [r for r in rows if r["na_img"] == na_img]
        ax.semilogy([r["na_ill"] for r in sel], [r["sbp_gigavoxels"] for r in sel], "o-",
                    label=f"NA img {na_img:g}")
    ax.set(xlabel="illumination NA", ylabel="SBP (gigavoxels)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def xz_slices(volumes: dict, path: Path) -> None:
    """Real-part xz slices through the lateral centre of each volume."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(volumes), figsize=(3.2 * len(volumes), 3.2), squeeze=False)
    vals = [np.real(v[:, v.shape[1] // 2, :]) for v in volumes.values()]
    lo, hi = min(v.min() for v in vals), max(v.max() for v in vals)
    for ax, (name, sl) in zip(axes[0], zip(volumes, vals)):
        ax.imshow(sl.T, origin="lower", cmap="viridis", vmin=lo, vmax=hi, aspect="auto")
        ax.set(title=name, xlabel="x", ylabel="z")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def error_histograms(hists: dict, path: Path) -> None:
    """2D (truth, reconstruction) RI histograms on a log colour scale."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(hists), figsize=(3.6 * len(hists), 3.4), squeeze=False)
    for ax, (name, (h, xe, ye)) in zip(axes[0], hists.items()):
        ax.imshow(np.log1p(h.T), origin="lower", extent=[xe[0], xe[-1], ye[0], ye[-1]], aspect="auto")
        ax.plot([xe[0], xe[-1]], [xe[0], xe[-1]], "w--", lw=0.8)
        ax.set(title=name, xlabel="true RI", ylabel="reconstructed RI")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def axial_traces(z: np.ndarray, traces: dict, path: Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, t in traces.items():
        ax.plot(z, t, "k--" if name == "truth" else "-", label=name)
    ax.set(xlabel="z (µm)", ylabel="RI")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_trace(trace: list, path: Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy([t["iteration"] for t in trace], [t["loss"] for t in trace])
    ax.set(xlabel="iteration", ylabel="loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
