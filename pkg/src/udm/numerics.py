"""Deterministic numerical kernels: unitary FFT, 8x8 block DCT, CG, and RNG.

Images are float64 arrays shaped ``(C, H, W)``; any leading batch axes are
carried through unchanged by the transforms here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import CGStalled, UdmError

_MASK64 = (1 << 64) - 1


def _check_finite(x, name="input"):
    if not np.all(np.isfinite(x)):
        raise UdmError(f"{name} contains NaN or Inf", code="non_finite")


def fft2(plane):
    """Unitary 2-D DFT over the last two axes (Parseval holds exactly)."""
    plane = np.asarray(plane)
    _check_finite(plane)
    return np.fft.fft2(plane, axes=(-2, -1), norm="ortho")


def ifft2(spectrum, real=True):
    out = np.fft.ifft2(spectrum, axes=(-2, -1), norm="ortho")
    return out.real if real else out


def _blocks(plane):
    h, w = plane.shape[-2:]
    if h % 8 or w % 8:
        raise UdmError(f"block DCT needs dims divisible by 8, got {h}x{w}", code="bad_shape")
    return plane.reshape(*plane.shape[:-2], h // 8, 8, w // 8, 8)


def dct2_block8(plane):
    """Orthonormal type-II DCT applied independently to every 8x8 block.

    The output keeps the input layout: coefficient (u, v) of the block at
    block-row i, block-col j sits at pixel (8i + u, 8j + v).
    """
    plane = np.asarray(plane, dtype=np.float64)
    b = _blocks(plane)
    return scipy.fft.dctn(b, type=2, norm="ortho", axes=(-3, -1)).reshape(plane.shape)


def idct2_block8(coeffs):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    b = _blocks(coeffs)
    return scipy.fft.idctn(b, type=2, norm="ortho", axes=(-3, -1)).reshape(coeffs.shape)


def conjugate_gradient(apply, b, tol=1e-10, max_iter=1000, x0=None):
    """Solve ``apply(x) = b`` for a symmetric positive definite ``apply``.

    Works on arrays of any shape (the inner product runs over all entries).
    Returns ``(x, iterations)``. Raises :class:`CGStalled` if the relative
    residual is still above ``tol`` after ``max_iter`` iterations.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    b_norm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    if b_norm == 0.0:
        return np.zeros_like(b), 0
    r = b - apply(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = np.vdot(r, r)
    for it in range(1, max_iter + 1):
        ap = apply(p)
        alpha = rs / np.vdot(p, ap)
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = np.vdot(r, r)
        if math.sqrt(rs_new) <= tol * b_norm:
            return x, it
        p = r + (rs_new / rs) * p
        rs = rs_new
    # The recursive residual drifts from the true one; report the true one.
    residual = np.linalg.norm(apply(x) - b) / b_norm
    if residual <= tol:
        return x, max_iter
    raise CGStalled(residual, max_iter)


@dataclass
class RngStream:
    """Counter-based random stream keyed by ``(root_seed, stream_id)``.

    Draws come from the Philox-4x64 block function evaluated at successive
    counter values, so a stream is fully determined by its three integers and
    two streams with different ``stream_id`` never share key material.
    ``counter`` counts consumed Philox blocks (four 64-bit words each).
    """

    root_seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        self.root_seed &= _MASK64
        self.stream_id &= _MASK64

    def _raw(self, n_words):
        blocks = -(-n_words // 4)
        bitgen = np.random.Philox(
            counter=[self.counter & _MASK64, self.counter >> 64, 0, 0],
            key=[self.root_seed, self.stream_id],
        )
        words = bitgen.random_raw(blocks * 4)
        self.counter += blocks
        return words[:n_words]

    def uniform(self, shape):
        """Uniform draws on the open interval (0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        words = self._raw(n)
        return (((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53).reshape(shape)

    def gaussian(self, shape):
        """Standard normal draws via Box-Muller on paired uniforms."""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = -(-n // 2)
        u = self.uniform((2, m))
        radius = np.sqrt(-2.0 * np.log(u[0]))
        angle = 2.0 * np.pi * u[1]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:n].reshape(shape)

    def child(self, index):
        """Independent stream for sub-task ``index`` (e.g. one training item)."""
        mixed = np.random.SeedSequence([self.root_seed, self.stream_id, int(index)]).generate_state(
            2, np.uint64
        )
        return RngStream(self.root_seed, int(mixed[0]) ^ int(mixed[1]))


def rng_gaussian(stream, n):
    return stream.gaussian(n)
