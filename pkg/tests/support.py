"""Shared oracles for the test modules."""

import numpy as np

from signalreid import lam
from signalreid.optim import Adam
from signalreid.tensor import Tensor, backward


def smooth_field(rng, h, w, d, length_scale=1.0):
    """Unit-variance random feature map, Gaussian-correlated over ``length_scale`` cells (toroidal)."""
    f = rng.normal(size=(h, w, d))
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    filt = np.exp(-2 * (np.pi * length_scale) ** 2 * (ky ** 2 + kx ** 2))
    f = np.real(np.fft.ifft2(np.fft.fft2(f, axes=(0, 1)) * filt[..., None], axes=(0, 1)))
    return f / f.std()


def shifted_pair_alignment(seed, grid=(8, 4), dim=8, steps=200, lr=1e-2):
    """Train one offset net to undo a one-row shift between two copies of a feature map.

    Returns (zero-offset loss, trained loss, max |offset| seen, delta_max).
    """
    rng = np.random.default_rng(seed)
    h, w = grid
    f = smooth_field(rng, h, w, dim)
    ref_map = Tensor(f.reshape(h * w, dim))
    moved = Tensor(np.roll(f, 1, axis=0).reshape(h * w, dim))
    net = lam.OffsetNetParams.init(rng, dim)
    grid_pts = lam.make_reference_grid(h, w)
    delta_max = lam.default_delta_max(grid)
    anchor = lam.deform_sample(ref_map, grid, grid_pts, None)

    def loss():
        off = lam.predict_offsets(moved, grid, net, delta_max=delta_max)
        sampled = lam.deform_sample(moved, grid, grid_pts, off)
        return lam.local_align_loss(anchor, sampled, anchor, pairs="to_anchor"), off

    base = lam.local_align_loss(anchor, lam.deform_sample(moved, grid, grid_pts, None), anchor,
                                pairs="to_anchor").item()
    opt = Adam({"offset": ([p for _, p in net.named_parameters()], lr)})
    worst = 0.0
    for _ in range(steps):
        opt.zero_grad()
        value, off = loss()
        worst = max(worst, float(np.abs(off.deltas.data).max()))
        backward(value)
        opt.step()
    value, off = loss()
    worst = max(worst, float(np.abs(off.deltas.data).max()))
    return base, value.item(), worst, delta_max
