"""Measurement operators: circular blur, masking, super-resolution and JPEG.

All blurs are circular, so a blur is diagonal in the unitary Fourier basis
with multiplier equal to the (unnormalized) DFT of the kernel wrapped around
the origin. Masks are shared across channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import UdmError
from .numerics import RngStream, dct2_block8, fft2, idct2_block8, ifft2

PINV_FLOOR = 1e-3

LUMA_QUANT = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)


# --------------------------------------------------------------------------
# kernels and masks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BlurKernel:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1] or taps.shape[0] % 2 == 0:
            raise UdmError(f"kernel must be square with odd side, got {taps.shape}", code="bad_kernel")
        if abs(taps.sum() - 1.0) > 1e-12:
            raise UdmError(f"kernel taps sum to {taps.sum()!r}, expected 1", code="bad_kernel")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    def spectrum(self, shape):
        """DFT multiplier of the kernel on an ``shape = (H, W)`` periodic grid."""
        h, w = shape
        c = self.size // 2
        offsets = np.arange(self.size) - c
        pad = np.zeros((h, w))
        np.add.at(pad, (offsets[:, None] % h, offsets[None, :] % w), self.taps)
        return np.fft.fft2(pad)


def _normalized(taps):
    taps = np.asarray(taps, dtype=np.float64)
    return BlurKernel(taps / taps.sum())


def _check_size(size):
    if size < 1 or size % 2 == 0:
        raise UdmError(f"kernel size must be odd and positive, got {size}", code="bad_kernel")


def build_gaussian_kernel(size, bandwidth) -> BlurKernel:
    return build_aniso_gaussian_kernel(size, (bandwidth, bandwidth))


def build_aniso_gaussian_kernel(size, bandwidths) -> BlurKernel:
    _check_size(size)
    b_row, b_col = bandwidths
    i = np.arange(size) - size // 2
    taps = np.exp(-(i[:, None] ** 2) / (2 * b_row**2) - (i[None, :] ** 2) / (2 * b_col**2))
    return _normalized(taps)


def build_uniform_kernel(size) -> BlurKernel:
    _check_size(size)
    return BlurKernel(np.full((size, size), 1.0 / size**2))


def identity_kernel() -> BlurKernel:
    return BlurKernel(np.ones((1, 1)))


def _keys_cubic(x, a=-0.5):
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def build_bicubic_kernel(factor) -> BlurKernel:
    """Separable bicubic anti-alias filter for decimation by ``factor``.

    The support is ``4 * factor - 1`` taps per axis, the odd-sized zero-phase
    version of the usual ``4 * factor`` window (its outermost taps are zero).
    """
    offsets = np.arange(-(2 * factor - 1), 2 * factor) / factor
    k1 = _keys_cubic(offsets)
    return _normalized(np.outer(k1, k1))


@dataclass(frozen=True)
class Mask:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or not np.all((values == 0.0) | (values == 1.0)):
            raise UdmError("mask must be a 2-D array of zeros and ones", code="bad_mask")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def build_random_mask(dims, missing_rate, stream: RngStream) -> Mask:
    h, w = dims
    if not 0.0 <= missing_rate < 1.0:
        raise UdmError(f"missing rate must be in [0, 1), got {missing_rate}", code="bad_mask")
    n = h * w
    n_missing = int(math.floor(missing_rate * n + 1e-9))
    order = np.argsort(stream.uniform(n), kind="stable")
    values = np.ones(n)
    values[order[:n_missing]] = 0.0
    return Mask(values.reshape(h, w))


def build_box_mask(dims, box) -> Mask:
    """Zero out ``box = (top, left, height, width)``."""
    h, w = dims
    top, left, bh, bw = box
    if top < 0 or left < 0 or top + bh > h or left + bw > w:
        raise UdmError(f"box {box} does not fit inside {dims}", code="bad_mask")
    values = np.ones((h, w))
    values[top : top + bh, left : left + bw] = 0.0
    return Mask(values)


def centered_box(dims, side):
    h, w = dims
    return ((h - side) // 2, (w - side) // 2, side, side)


def quant_table(quality) -> np.ndarray:
    """Standard IJG scaling of the luminance table to quality ``1..100``."""
    if not 1 <= quality <= 100:
        raise UdmError(f"quality factor must be in [1, 100], got {quality}", code="bad_quality")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    table = (LUMA_QUANT * scale + 50) // 100
    return np.clip(table, 1, 255).astype(np.float64)


# --------------------------------------------------------------------------
# operators
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Blur:
    kernel: BlurKernel
    name = "blur"

    def output_shape(self, shape):
        return shape

    def apply(self, x):
        return ifft2(self.kernel.spectrum(x.shape[-2:]) * fft2(x))

    def adjoint(self, y):
        return ifft2(np.conj(self.kernel.spectrum(y.shape[-2:])) * fft2(y))

    def pinv(self, y):
        spec = self.kernel.spectrum(y.shape[-2:])
        mag = np.abs(spec)
        floor = PINV_FLOOR * mag.max()
        safe = np.where(mag < floor, floor * np.exp(1j * np.angle(spec)), spec)
        return ifft2(fft2(y) / safe)


@dataclass(frozen=True)
class Masking:
    mask: Mask
    name = "mask"

    def output_shape(self, shape):
        return shape

    def apply(self, x):
        return x * self.mask.values

    adjoint = apply
    pinv = apply


def fold_aliases(spec, factor):
    """Sum a full-grid spectrum over the ``factor**2`` frequencies that alias
    onto each frequency of the decimated grid."""
    h, w = spec.shape[-2:]
    s = factor
    folded = spec.reshape(*spec.shape[:-2], s, h // s, s, w // s)
    return folded.sum(axis=(-4, -2))


@dataclass(frozen=True)
class SuperResolution:
    kernel: BlurKernel
    factor: int
    name = "sr"

    def _check(self, shape):
        h, w = shape[-2:]
        if h % self.factor or w % self.factor:
            raise UdmError(f"SR factor {self.factor} does not divide {h}x{w}", code="bad_shape")

    def output_shape(self, shape):
        self._check(shape)
        return (*shape[:-2], shape[-2] // self.factor, shape[-1] // self.factor)

    def apply(self, x):
        self._check(x.shape)
        s = self.factor
        return Blur(self.kernel).apply(x)[..., ::s, ::s]

    def upsample(self, y):
        s = self.factor
        up = np.zeros((*y.shape[:-2], y.shape[-2] * s, y.shape[-1] * s))
        up[..., ::s, ::s] = y
        return up

    def adjoint(self, y):
        return Blur(self.kernel).adjoint(self.upsample(y))

    def pinv(self, y):
        """Minimum-norm solution ``A^T (A A^T)^+ y`` with a relative floor on
        the low-resolution spectrum of ``A A^T``."""
        s = self.factor
        shape = (y.shape[-2] * s, y.shape[-1] * s)
        power = fold_aliases(np.abs(self.kernel.spectrum(shape)) ** 2, s).real / s**2
        floor = PINV_FLOOR * power.max()
        z = ifft2(fft2(y) / np.maximum(power, floor))
        return self.adjoint(z)


@dataclass(frozen=True)
class Jpeg:
    """Per-channel JPEG-style quantization of intensities in [0, 1].

    Pixels are mapped to the usual level-shifted 0..255 range, transformed
    with the 8x8 DCT, quantized with the scaled luminance table and decoded.
    There is no chroma transform and no clipping.
    """

    quality: int
    name = "jpeg"

    def output_shape(self, shape):
        return shape

    def apply(self, x):
        q = np.tile(quant_table(self.quality), (x.shape[-2] // 8, x.shape[-1] // 8))
        coeffs = dct2_block8(255.0 * np.asarray(x, dtype=np.float64) - 128.0)
        return (idct2_block8(np.round(coeffs / q) * q) + 128.0) / 255.0

    def adjoint(self, y):
        raise UdmError("JPEG is nonlinear", code="no_adjoint")

    def pinv(self, y):
        raise UdmError("JPEG is nonlinear", code="no_pinv")


Operator = Union[Blur, Masking, SuperResolution, Jpeg]


@dataclass(frozen=True)
class MeasurementModel:
    operator: Operator
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise UdmError("sigma must be non-negative", code="bad_sigma")

    @property
    def kind(self) -> str:
        return "nonlinear" if isinstance(self.operator, Jpeg) else "linear"

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    def with_sigma(self, sigma) -> "MeasurementModel":
        return MeasurementModel(self.operator, sigma)


# Function-style entry points -----------------------------------------------


def apply(model: MeasurementModel, x):
    return model.operator.apply(np.asarray(x, dtype=np.float64))


def adjoint(model: MeasurementModel, y):
    if not model.is_linear:
        raise UdmError("adjoint requested for a nonlinear operator", code="no_adjoint")
    return model.operator.adjoint(np.asarray(y, dtype=np.float64))


def pseudo_inverse_apply(model: MeasurementModel, y):
    if not model.is_linear:
        raise UdmError("pseudo-inverse requested for a nonlinear operator", code="no_pinv")
    return model.operator.pinv(np.asarray(y, dtype=np.float64))


def spectrum(model: MeasurementModel, shape):
    """Fourier multiplier of the circular blur inside ``model``."""
    op = model.operator
    if isinstance(op, (Blur, SuperResolution)):
        return op.kernel.spectrum(shape)
    raise UdmError(f"{op.name} operator has no blur spectrum", code="no_spectrum")


def measure(model: MeasurementModel, x, stream: RngStream):
    """Draw ``y = A(x) + sigma * n``."""
    clean = apply(model, x)
    if model.sigma == 0:
        return clean
    return clean + model.sigma * stream.gaussian(clean.shape)


def jpeg_soft_apply(x, quality):
    """Forward pass of the straight-through surrogate (identical to ``Jpeg``)."""
    return Jpeg(quality).apply(x)


def jpeg_soft_vjp(x, cotangent, quality):
    """Vector-Jacobian product of the surrogate.

    With the rounding derivative replaced by identity the pipeline reduces to
    ``IDCT diag(q) diag(1/q) DCT``, which is the identity map.
    """
    return np.array(cotangent, dtype=np.float64)


# Task builders used by configuration files ---------------------------------

TASKS = (
    "deblur_gauss",
    "deblur_uniform",
    "deblur_aniso",
    "inpaint_random",
    "inpaint_box",
    "sr",
    "jpeg",
)

TASK_DEFAULTS = {
    "deblur_gauss": {"size": 5, "bandwidth": 10.0},
    "deblur_uniform": {"size": 9},
    "deblur_aniso": {"size": 9, "bandwidths": [20.0, 1.0]},
    "inpaint_random": {"rate": 0.7},
    "inpaint_box": {"side": 0},
    "sr": {"factor": 4, "kernel": "bicubic", "size": 3, "bandwidth": 10.0},
    "jpeg": {"quality": 10},
}


def build_operator(task: str, params: dict, image_shape, stream: RngStream | None = None) -> Operator:
    """Instantiate the operator named by a config task string."""
    if task not in TASKS:
        raise UdmError(f"unknown task {task!r}", code="bad_task")
    p = {**TASK_DEFAULTS[task], **params}
    dims = tuple(image_shape[-2:])
    if task == "deblur_gauss":
        return Blur(build_gaussian_kernel(p["size"], p["bandwidth"]))
    if task == "deblur_uniform":
        return Blur(build_uniform_kernel(p["size"]))
    if task == "deblur_aniso":
        return Blur(build_aniso_gaussian_kernel(p["size"], tuple(p["bandwidths"])))
    if task == "inpaint_random":
        return Masking(build_random_mask(dims, p["rate"], stream or RngStream(0, 0)))
    if task == "inpaint_box":
        side = p["side"] or min(dims) // 2
        return Masking(build_box_mask(dims, centered_box(dims, side)))
    if task == "sr":
        if p["kernel"] == "bicubic":
            kernel = build_bicubic_kernel(p["factor"])
        else:
            kernel = build_gaussian_kernel(p["size"], p["bandwidth"])
        return SuperResolution(kernel, int(p["factor"]))
    return Jpeg(int(p["quality"]))
