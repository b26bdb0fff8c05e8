"""Untrained encoder-decoder generator for deep-image-prior reconstructions.

The network maps a fixed noise tensor to a complex volume. Encoder blocks
downsample with strided convolutions, decoder blocks use nearest-neighbour
upsampling followed by a convolution; there are no skip connections. Hidden
blocks apply batch normalisation and leaky ReLU. The last block is linear, so
the output can take either sign.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class DipNetwork:
    """Fully convolutional generator ``G(θ)`` with a fixed input ``z``.

    Parameters
    ----------
    shape : tuple of int
        Spatial output shape ``(X, Y, Z)``. Extents not divisible by
        ``2**depth`` are padded internally and cropped on output.
    channels : sequence of int
        Encoder widths; the decoder mirrors them.
    out_features : int
        Even number of output feature maps; the first half is summed into the
        real part and the second half into the imaginary part.
    input_channels : int, optional
        Channels of ``z``; defaults to ``channels[0]``.
    output_scale : float
        Multiplies the generated volume (sets its physical units).
    slope : float
        Leaky-ReLU slope.
    seed : int or numpy Generator
        Seeds the weights and ``z``.
    """

    def __init__(self, shape: Sequence[int], channels: Sequence[int] = (16, 32, 64, 128),
                 out_features: int = 4, input_channels: Optional[int] = None, kernel: int = 3,
                 output_scale: float = 1.0, slope: float = 0.1, seed=0):
        if out_features < 2 or out_features % 2:
            raise ValueError(f"out_features must be a positive even number, got {out_features}")
        self.shape = tuple(int(s) for s in shape)
        self.channels = tuple(int(c) for c in channels)
        self.depth = len(self.channels)
        self.out_features = out_features
        self.kernel = kernel
        self.output_scale = float(output_scale)
        self.slope = slope
        m = 2 ** self.depth
        self.padded_shape = tuple(-(-s // m) * m for s in self.shape)
        rng = np.random.default_rng(seed)
        cin = input_channels or self.channels[0]
        self.z_input = rng.uniform(0.0, 0.1, (cin,) + self.padded_shape)
        self.z_input.setflags(write=False)

        self.params: dict[str, Tensor] = {}
        prev = cin
        for i, c in enumerate(self.channels):
            self._conv(f"enc{i}", prev, c, rng, bias=False)
            self._bn(f"enc{i}", c)
            prev = c
        widths = list(self.channels[-2::-1]) + [out_features]
        for i, c in enumerate(widths):
            last = i == len(widths) - 1
            self._conv(f"dec{i}", prev, c, rng, bias=last)
            if not last:
                self._bn(f"dec{i}", c)
            prev = c

    # ------------------------------------------------------------ construction helpers

    def _conv(self, name, cin, cout, rng, bias):
        k = self.kernel
        bound = 1.0 / np.sqrt(cin * k ** 3)
        self.params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k, k)),
                                          requires_grad=True, name=f"{name}.w")
        if bias:
            self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")

    def _bn(self, name, c):
        self.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True, name=f"{name}.gamma")
        self.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True, name=f"{name}.beta")

    # ------------------------------------------------------------ evaluation

    @property
    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def features(self, z) -> Tensor:
        """Raw real output feature maps for an input ``z`` of shape ``(C, X, Y, Z)``."""
        P = self.params
        x = ad.as_tensor(z)
        for i in range(self.depth):
            x = ad.conv3d(x, P[f"enc{i}.w"], stride=2)
            x = ad.leaky_relu(ad.batch_norm(x, P[f"enc{i}.gamma"], P[f"enc{i}.beta"]), self.slope)
        for i in range(self.depth):
            x = ad.upsample3d(x, 2)
            if i == self.depth - 1:
                x = ad.linear(ad.conv3d(x, P[f"dec{i}.w"], P[f"dec{i}.b"]))
            else:
                x = ad.conv3d(x, P[f"dec{i}.w"])
                x = ad.leaky_relu(ad.batch_norm(x, P[f"dec{i}.gamma"], P[f"dec{i}.beta"]), self.slope)
        return x

    def generate(self, crop: Optional[tuple] = None) -> Tensor:
        """Complex output volume ``G(θ)``.

        Parameters
        ----------
        crop : tuple of slices, optional
            Lateral ``(slice_x, slice_y)`` window of ``z`` to run the network
            on (spatial patching). Window extents must be multiples of
            ``2**depth``. The axial extent is always the full volume.
        """
        if crop is None:
            z = self.z_input
            out_shape = self.shape
        else:
            sx, sy = crop
            z = self.z_input[:, sx, sy, :]
            out_shape = z.shape[1:3] + (self.shape[2],)
            m = 2 ** self.depth
            if z.shape[1] % m or z.shape[2] % m:
                raise ValueError(f"patch extents {z.shape[1:3]} must be multiples of {m}")
        f = self.features(z)
        h = self.out_features // 2
        re = ad.sum(f[:h], axis=0)
        im = ad.sum(f[h:], axis=0)
        vol = ad.mul(ad.make_complex(re, im), self.output_scale)
        if vol.shape != tuple(out_shape):
            vol = vol[: out_shape[0], : out_shape[1], : out_shape[2]]
        return vol

    # ------------------------------------------------------------ state

    def state_dict(self) -> dict:
        """Copies of all parameters plus the fixed input, keyed by name."""
        state = {k: v.data.copy() for k, v in self.params.items()}
        state["z_input"] = np.array(self.z_input)
        return state

    def load_state_dict(self, state: dict) -> None:
        for k, v in self.params.items():
            if state[k].shape != v.data.shape:
                raise ValueError(f"parameter {k}: shape {state[k].shape} != {v.data.shape}")
            v.data = np.array(state[k], dtype=float)
        if "z_input" in state:
            z = np.array(state["z_input"], dtype=float)
            if z.shape != self.z_input.shape:
                raise ValueError("z_input shape mismatch")
            z.setflags(write=False)
            self.z_input = z


def dip_generate(net: DipNetwork) -> Tensor:
    """Run ``net`` on its fixed input; see :meth:`DipNetwork.generate`."""
    return net.generate()
