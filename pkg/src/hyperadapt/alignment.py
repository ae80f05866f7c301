"""Unsupervised phoneme-to-frame alignment.

Affinities come from negative squared distances between conv-projected
phoneme and mel features; a per-frame softmax over phonemes gives the soft
alignment. Training drives the marginal likelihood of all monotonic paths
(forward-sum DP) plus a binarization term tying the soft distribution to the
extracted Viterbi path. A width-scaled diagonal prior stabilizes the first
steps and is annealed away by the schedule.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import featio, kernels
from .autodiff import Tensor
from .errors import InfeasibleAlignmentError, InputError, StateError
from .layers import Conv1d, Module


@dataclass
class AlignmentMap:
    log_probs: Tensor  # (n phonemes, m frames), columns are log distributions
    prior_strength: float = 0.0
    hard_path: Optional[np.ndarray] = None  # per-frame phoneme index


class AlignmentEncoder(Module):
    """Projects phoneme embeddings and mel frames into a shared space."""

    def __init__(self, rng, d_text, d_mel, d_attn):
        self.text_conv1 = Conv1d(rng, d_text, d_attn, 3)
        self.text_conv2 = Conv1d(rng, d_attn, d_attn, 1)
        self.mel_conv1 = Conv1d(rng, d_mel, d_attn, 3)
        self.mel_conv2 = Conv1d(rng, d_attn, d_attn, 1)

    def project_text(self, h):
        return self.text_conv2(ad.relu(self.text_conv1(h)))

    def project_mel(self, mel):
        return self.mel_conv2(ad.relu(self.mel_conv1(mel)))


def diagonal_prior(n, m, sigma_frac=0.15):
    """Log-Gaussian ridge around the proportional phoneme position."""
    centers = np.arange(m) * (n - 1) / max(m - 1, 1)
    idx = np.arange(n)[:, None]
    sigma = max(sigma_frac * n, 0.5)
    return -((idx - centers[None, :]) ** 2) / (2.0 * sigma * sigma)


def soft_align(text_feats, mel_feats, prior_strength=0.0):
    """Per-frame log distribution over phonemes from pairwise affinities.

    Both inputs must already live in the shared attention space. The prior,
    when active, is added to the logits so columns still normalize.
    """
    n, k = text_feats.shape
    m, k2 = mel_feats.shape
    if n == 0 or m == 0:
        raise InputError(f"soft_align: empty input ({n} phonemes, {m} frames)")
    if k != k2:
        raise InputError(f"soft_align: feature dims differ ({k} vs {k2})")
    dt = text_feats.dtype
    dots = ad.matmul(text_feats, ad.transpose_last(mel_feats))  # (n, m)
    ones_k = ad.constant(np.ones((k, 1)), dtype=dt)
    t_sq = ad.matmul(ad.mul(text_feats, text_feats), ones_k)    # (n, 1)
    m_sq = ad.matmul(ad.mul(mel_feats, mel_feats), ones_k)      # (m, 1)
    t_grid = ad.matmul(t_sq, ad.constant(np.ones((1, m)), dtype=dt))
    m_grid = ad.matmul(ad.constant(np.ones((n, 1)), dtype=dt), ad.transpose_last(m_sq))
    affinity = ad.sub(ad.scale(dots, 2.0), ad.add(t_grid, m_grid))  # -(|t|^2 + |m|^2 - 2 t.m)
    if prior_strength > 0.0:
        prior = diagonal_prior(n, m).astype(text_feats.data.dtype)
        affinity = ad.add(affinity, Tensor(prior * prior_strength))
    return AlignmentMap(ad.log_softmax(affinity, axis=0), prior_strength=prior_strength)


def _require_feasible(shape, where):
    n, m = shape
    if m < n:
        raise InfeasibleAlignmentError(
            f"{where}: {m} frames cannot cover {n} phonemes monotonically"
        )


def forward_sum_loss(amap):
    """Negative log marginal probability of all monotonic complete paths."""
    logp = amap.log_probs
    _require_feasible(logp.shape, "forward_sum_loss")
    loss, grad = kernels.forward_sum(logp.data.astype(np.float64))
    grad = grad.astype(logp.data.dtype)

    def grad_fn(g):
        return (g * grad,)

    return ad.from_op(np.asarray(loss, dtype=logp.data.dtype), (logp,), grad_fn, "forward_sum")


def viterbi_durations(amap):
    """Best-path durations; also records the hard path on the map."""
    logp = amap.log_probs
    _require_feasible(logp.shape, "viterbi_durations")
    durations = kernels.viterbi(logp.data.astype(np.float64))
    amap.hard_path = np.repeat(np.arange(logp.shape[0]), durations)
    return durations


def binarization_loss(amap):
    """Cross-entropy of the soft alignment against the extracted hard path."""
    if amap.hard_path is None:
        raise StateError("binarization_loss: extract a hard path first")
    logp = amap.log_probs
    path = np.asarray(amap.hard_path)
    m = logp.shape[1]
    if path.shape != (m,):
        raise InputError(f"binarization_loss: path length {path.shape} vs {m} frames")
    cols = np.arange(m)
    value = -logp.data[path, cols].sum()

    def grad_fn(g):
        gl = np.zeros_like(logp.data)
        gl[path, cols] = -g
        return (gl,)

    return ad.from_op(np.asarray(value, dtype=logp.data.dtype), (logp,), grad_fn, "binarization")


def dump_alignment(amap, logits_path, path_path=None):
    """Debug artifact: soft map (and hard path when present) as feature files."""
    featio.write_array(logits_path, amap.log_probs.data.astype(np.float32))
    if path_path is not None:
        if amap.hard_path is None:
            raise StateError("dump_alignment: no hard path to dump")
        featio.write_array(path_path, amap.hard_path.astype(np.int64))
