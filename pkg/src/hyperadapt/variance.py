"""Variance modeling: durations, pitch through a wavelet decomposition, and
energy, plus the length regulator that moves between phoneme and frame time.

Pitch handling follows the decompose/reconstruct route: the raw contour is
interpolated through unvoiced gaps, logged, normalized, and expanded over a
bank of Mexican-hat wavelets at dyadic scales. The predictor regresses the
wavelet coefficients plus the contour's mean and variance; synthesis inverts
the bank and de-normalizes.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, StateError
from .features import dequantize, quantize
from .layers import Conv1d, Dense, Embedding, LayerNorm, Module

N_SCALES = 10
_SCALES = 2.0 ** np.arange(N_SCALES)

# Amplitude constant for the delta-style inverse of the dyadic Mexican-hat
# bank below. Fitted once by least squares over band-limited unit-variance
# contours (lengths 100..400); reconstruction correlation on that family
# exceeds 0.997.
_ICWT_GAIN = 0.3197


def _ricker(scale):
    half = int(np.ceil(4.0 * scale))
    t = np.arange(-half, half + 1, dtype=np.float64)
    amp = 2.0 / (np.sqrt(3.0 * scale) * np.pi ** 0.25)
    return amp * (1.0 - (t / scale) ** 2) * np.exp(-(t * t) / (2.0 * scale * scale))


_BANK = [_ricker(a) for a in _SCALES]


def normalize_f0(f0):
    """Interpolate unvoiced gaps, log, standardize.

    Returns (normalized contour, mean, std) where mean/std describe the
    log-domain contour before standardization. Edge gaps hold the nearest
    voiced value. A constant contour normalizes to zeros (std clamped).
    """
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.ndim != 1 or f0.size == 0:
        raise InputError("normalize_f0: contour must be a non-empty 1-D array")
    voiced = f0 > 0
    if not voiced.any():
        raise InputError("normalize_f0: fully unvoiced contour cannot be normalized")
    idx = np.arange(f0.size)
    filled = np.interp(idx, idx[voiced], f0[voiced])
    log_f0 = np.log(filled)
    mean = float(log_f0.mean())
    std = float(log_f0.std())
    out = (log_f0 - mean) / max(std, 1e-8)
    return out, mean, std


def interpolated_log_f0(f0):
    """Log contour with unvoiced gaps filled, without standardization."""
    out, mean, std = normalize_f0(f0)
    return out * max(std, 1e-8) + mean


def cwt_decompose(contour):
    """(N_SCALES, m) wavelet coefficients of a normalized contour."""
    x = np.asarray(contour, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise InputError("cwt_decompose: need a 1-D contour of length >= 2")
    m = x.size
    out = np.empty((N_SCALES, m))
    for j, w in enumerate(_BANK):
        half = (len(w) - 1) // 2
        xp = _reflect_pad(x, half)
        out[j] = np.convolve(xp, w, mode="same")[half : half + m]
    return out


def _reflect_pad(x, pad):
    # np.pad reflect caps the pad width at len-1 per application
    out = x
    while pad > 0:
        step = min(pad, out.size - 1)
        out = np.pad(out, step, mode="reflect")
        pad -= step
    return out


def icwt_reconstruct(spectrogram, mean, variance):
    """Invert the wavelet bank and de-normalize back to a contour in Hz."""
    spec = np.asarray(spectrogram, dtype=np.float64)
    if spec.ndim != 2 or spec.shape[0] != N_SCALES:
        raise InputError(f"icwt_reconstruct: expected ({N_SCALES}, m) spectrogram, got {spec.shape}")
    if variance < 0:
        raise InputError(f"icwt_reconstruct: negative variance {variance}")
    normalized = _ICWT_GAIN * (spec / np.sqrt(_SCALES)[:, None]).sum(axis=0)
    return np.exp(normalized * np.sqrt(variance) + mean)


def pitch_targets(f0):
    """Training targets for the pitch predictor: (spectrogram, mean, variance)."""
    normalized, mean, std = normalize_f0(f0)
    return cwt_decompose(normalized), mean, std * std


def length_regulate(h, durations):
    """Repeat hidden row i durations[i] times along the time axis."""
    durations = np.asarray(durations)
    if not np.issubdtype(durations.dtype, np.integer):
        raise InputError("length_regulate: durations must be integers")
    if durations.ndim != 1 or durations.shape[0] != h.shape[0]:
        raise InputError(
            f"length_regulate: {durations.shape[0]} durations for {h.shape[0]} rows"
        )
    if (durations < 0).any():
        raise InputError("length_regulate: negative duration")
    if durations.sum() == 0:
        raise InputError("length_regulate: all durations zero, output would be empty")
    ids = np.repeat(np.arange(h.shape[0]), durations)
    out_data = h.data[ids]

    def grad_fn(g):
        gh = np.zeros_like(h.data)
        np.add.at(gh, ids, g)
        return (gh,)

    return ad.from_op(out_data, (h,), grad_fn, "length_regulate")


def durations_from_log(log_durations):
    """Inference rounding: round(exp(x)) clamped to at least one frame."""
    d = np.rint(np.exp(np.asarray(log_durations, dtype=np.float64)))
    return np.maximum(d, 1).astype(np.int64)


class ConvStack(Module):
    """Two conv/ReLU/layer-norm/dropout blocks; the shared predictor trunk.

    An optional adapter callable is applied to the stack output, which is
    where parameter-efficient tuning hooks into the variance predictors.
    """

    def __init__(self, rng, d_h, kernel=3, p_dropout=0.5):
        self.conv1 = Conv1d(rng, d_h, d_h, kernel)
        self.norm1 = LayerNorm(d_h)
        self.conv2 = Conv1d(rng, d_h, d_h, kernel)
        self.norm2 = LayerNorm(d_h)
        self.p_dropout = p_dropout

    def __call__(self, x, ctx, adapter=None):
        h = ad.dropout(self.norm1(ad.relu(self.conv1(x))), self.p_dropout, ctx.rng, ctx.training)
        h = ad.dropout(self.norm2(ad.relu(self.conv2(h))), self.p_dropout, ctx.rng, ctx.training)
        if adapter is not None:
            h = adapter(h)
        return h


class DurationPredictor(Module):
    def __init__(self, rng, d_h, kernel=3, p_dropout=0.5):
        self.stack = ConvStack(rng, d_h, kernel, p_dropout)
        self.head = Dense(rng, d_h, 1)

    def __call__(self, h, ctx):
        out = self.head(self.stack(h, ctx))
        return ad.reshape(out, (h.shape[0],))


class PitchPredictor(Module):
    """Regresses wavelet coefficients per frame plus contour mean/variance."""

    def __init__(self, rng, d_h, n_scales=N_SCALES, kernel=3, p_dropout=0.5):
        self.stack = ConvStack(rng, d_h, kernel, p_dropout)
        self.spec_head = Dense(rng, d_h, n_scales)
        self.mean_head = Dense(rng, d_h, 1)
        self.var_head = Dense(rng, d_h, 1)

    def __call__(self, h, ctx, adapter=None):
        trunk = self.stack(h, ctx, adapter)
        spec = ad.transpose_last(self.spec_head(trunk))  # (scales, frames)
        pooled = ad.reshape(ad.mean_axis(trunk, 0), (1, h.shape[1]))
        mean = ad.reshape(self.mean_head(pooled), (1,))
        var = ad.reshape(self.var_head(pooled), (1,))
        return spec, mean, var


class EnergyPredictor(Module):
    def __init__(self, rng, d_h, kernel=3, p_dropout=0.5):
        self.stack = ConvStack(rng, d_h, kernel, p_dropout)
        self.head = Dense(rng, d_h, 1)

    def __call__(self, h, ctx, adapter=None):
        out = self.head(self.stack(h, ctx, adapter))
        return ad.reshape(out, (h.shape[0],))


class VarianceAdapter(Module):
    """Duration/pitch/energy predictors plus the quantized embedding tables
    that feed predicted (or teacher) values back into the frame sequence.

    Quantization ranges come from the training split and ride along in the
    checkpoint; using the energy or pitch tables before ranges are set is a
    state error.
    """

    N_BINS = 256

    def __init__(self, rng, d_h, d_spk, n_scales=N_SCALES, kernel=3, p_dropout=0.5):
        self.spk_proj = Dense(rng, d_spk, d_h)
        self.duration = DurationPredictor(rng, d_h, kernel, p_dropout)
        self.pitch = PitchPredictor(rng, d_h, n_scales, kernel, p_dropout)
        self.energy = EnergyPredictor(rng, d_h, kernel, p_dropout)
        self.pitch_embed = Embedding(rng, self.N_BINS, d_h)
        self.energy_embed = Embedding(rng, self.N_BINS, d_h)
        self.pitch_range = None   # (min, max) of interpolated log-f0, train split
        self.energy_range = None  # (min, max) of frame energy, train split

    def set_ranges(self, pitch_range, energy_range):
        self.pitch_range = (float(pitch_range[0]), float(pitch_range[1]))
        self.energy_range = (float(energy_range[0]), float(energy_range[1]))

    def condition(self, h, spk_vec):
        """Add the projected speaker embedding to every position."""
        if spk_vec.data.ndim != 2 or spk_vec.shape[0] != 1:
            raise InputError(f"condition: speaker vector must be (1, d), got {spk_vec.shape}")
        projected = self.spk_proj(spk_vec)
        return ad.add(h, ad.reshape(projected, (projected.shape[1],)))

    def _require(self, which):
        value = getattr(self, which)
        if value is None:
            raise StateError(f"{which} not set: train ranges must be loaded before embedding lookup")
        return value

    def inject_pitch(self, h, log_f0):
        lo, hi = self._require("pitch_range")
        bins = quantize(log_f0, lo, hi, self.N_BINS)
        return ad.add(h, self.pitch_embed(bins))

    def inject_energy(self, h, energy):
        lo, hi = self._require("energy_range")
        bins = quantize(energy, lo, hi, self.N_BINS)
        return ad.add(h, self.energy_embed(bins))

    def dequantize_energy(self, bins):
        lo, hi = self._require("energy_range")
        return dequantize(bins, lo, hi, self.N_BINS)
