"""Waveform and token fidelity metrics.

Ratios are reported in dB and clamped to [-100, +100] so downstream CSVs
stay finite and comparisons stay total.
"""

from __future__ import annotations

import numpy as np
import scipy.fft

from .audio import AudioSignal
from .grid import TokenGrid, TokenState

DB_CAP = 100.0

# multi-resolution cepstral comparison: four coefficient counts, shared
# 25 ms window / 10 ms hop front end
MFCC_SCALES = (8, 16, 32, 64)
_WIN_SEC = 0.025
_HOP_SEC = 0.010


def _samples(x) -> np.ndarray:
    if isinstance(x, AudioSignal):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def _pair(ref, est) -> tuple:
    r, e = _samples(ref), _samples(est)
    if r.shape != e.shape:
        raise ValueError("signals must have equal length")
    if not np.any(r):
        raise ValueError("reference signal has zero energy")
    return r, e


def _ratio_db(num: float, den: float) -> float:
    # checked first so a silent estimate (num == den == 0) floors
    if num == 0.0:
        return -DB_CAP
    if den == 0.0:
        return DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def si_snr(ref, est) -> float:
    """Scale-invariant SNR: est is compared against its own projection of
    ref, so si_snr(x, c*x) hits the cap for every c > 0."""
    r, e = _pair(ref, est)
    alpha = float(np.dot(e, r) / np.dot(r, r))
    target = alpha * r
    residual = target - e
    return _ratio_db(float(np.dot(target, target)),
                     float(np.dot(residual, residual)))


def sdr(ref, est) -> float:
    r, e = _pair(ref, est)
    residual = r - e
    return _ratio_db(float(np.dot(r, r)),
                     float(np.dot(residual, residual)))


def _mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_inv(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    pts = _mel_inv(np.linspace(_mel(0.0), _mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mfcc(signal, sample_rate: int = 16000, n_coef: int = 16,
         n_mels: int | None = None) -> np.ndarray:
    """(frames, n_coef) cepstra: Hann window, mel filterbank, log, DCT-II."""
    x = _samples(signal)
    if isinstance(signal, AudioSignal):
        sample_rate = signal.sample_rate
    win_len = int(round(_WIN_SEC * sample_rate))
    hop = int(round(_HOP_SEC * sample_rate))
    if x.size < win_len:
        raise ValueError("signal shorter than one analysis window")
    if n_mels is None:
        n_mels = max(40, n_coef)
    if n_coef > n_mels:
        raise ValueError("n_coef cannot exceed n_mels")
    n_fft = 1
    while n_fft < win_len:
        n_fft *= 2
    window = np.hanning(win_len)
    starts = range(0, x.size - win_len + 1, hop)
    frames = np.stack([x[s:s + win_len] * window for s in starts])
    power = np.abs(np.fft.rfft(frames, n_fft, axis=1)) ** 2
    fb = _filterbank(n_mels, n_fft, sample_rate)
    logmel = np.log(power @ fb.T + 1e-10)
    return scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, :n_coef]


def mfcc_distance(ref, est, sample_rate: int = 16000) -> float:
    """Mean over four coefficient scales of the squared cepstral difference
    summed over frames and coefficients."""
    r, e = _pair(ref, est)
    if isinstance(ref, AudioSignal):
        sample_rate = ref.sample_rate
    total = 0.0
    for n_coef in MFCC_SCALES:
        a = mfcc(r, sample_rate, n_coef)
        b = mfcc(e, sample_rate, n_coef)
        total += float(np.sum((a - b) ** 2))
    return total / len(MFCC_SCALES)


def token_accuracy(truth: TokenGrid, recovered: TokenGrid,
                   states: np.ndarray) -> float | None:
    """Fraction of concealed cells that were predicted exactly.

    Returns None when nothing was concealed; 0.0 would misread as
    "all wrong".
    """
    states = np.asarray(states)
    if truth.tokens.shape != recovered.tokens.shape or \
            states.shape != truth.tokens.shape:
        raise ValueError("grids and states must share one shape")
    mask = states == int(TokenState.CONCEALED)
    if not np.any(mask):
        return None
    return float(np.mean(truth.tokens[mask] == recovered.tokens[mask]))
