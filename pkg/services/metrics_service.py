"""
Evaluation metrics: LSD, ILD difference, ITD difference and the neighbor
dissimilarity statistic.

ITD is estimated from magnitudes only: each ear's spectrum is turned into a
minimum-phase impulse response by the real-cepstrum method, any explicit
onset delay is applied as a linear phase, both ears are low-passed and the
interaural cross-correlation peak gives the lag. Positive ITD means the
right ear lags the left.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import signal

from config.settings import settings
from models.hrtf_models import HRTFSet
from services.loss_service import ild_loss, lsd_loss, ndl_loss
from utils.exceptions import InsufficientResolutionError, InvalidArgumentError

logger = logging.getLogger(__name__)

MIN_ITD_BINS = 16
LOWPASS_ORDER = 4


def lsd_metric(G: HRTFSet, HR: HRTFSet) -> float:
    """Log-spectral distance in dB (same computation as the training loss)"""
    return lsd_loss(G, HR)


def ild_metric(G: HRTFSet, HR: HRTFSet) -> float:
    return ild_loss(G, HR)


def ndl_statistic(G: HRTFSet, HR: HRTFSet) -> Optional[float]:
    """Neighbor dissimilarity on equiangular grids, None otherwise"""
    if not HR.grid.is_equiangular:
        return None
    return ndl_loss(G, HR)


def minimum_phase_response(magnitude: np.ndarray, nfft: int) -> np.ndarray:
    """Minimum-phase impulse response of a one-sided magnitude spectrum (nfft // 2 + 1 bins)"""
    log_mag = np.log(np.maximum(magnitude, 1e-12))
    cep = np.fft.irfft(log_mag, nfft)

    folded = np.zeros_like(cep)
    folded[0] = cep[0]
    folded[1:nfft // 2] = 2.0 * cep[1:nfft // 2]
    folded[nfft // 2] = cep[nfft // 2]
    return np.fft.irfft(np.exp(np.fft.rfft(folded)), nfft)


def _one_sided(spectrum: np.ndarray) -> np.ndarray:
    """Bins k = 1..W extended with a DC bin equal to bin 1"""
    return np.concatenate([spectrum[:1], spectrum])


def _next_power_of_two(value: int) -> int:
    return 1 << max(0, int(value - 1).bit_length())


def binaural_responses(hrtf: HRTFSet, index: int, lowpass_hz: Optional[float] = None,
                       max_lag_s: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Low-passed, delayed minimum-phase left and right responses of one direction"""
    if hrtf.n_bins < MIN_ITD_BINS:
        raise InsufficientResolutionError(
            f"ITD estimation needs at least {MIN_ITD_BINS} bins, got {hrtf.n_bins}"
        )
    if not 0 <= index < hrtf.n_directions:
        raise InvalidArgumentError(f"direction index {index} outside [0, {hrtf.n_directions})")
    fs = hrtf.sample_rate_hz
    lowpass_hz = settings.evaluation.itd_lowpass_hz if lowpass_hz is None else lowpass_hz
    max_lag_s = settings.evaluation.itd_max_lag_s if max_lag_s is None else max_lag_s

    nfft = 2 * hrtf.n_bins
    delays = np.zeros(2) if hrtf.delays_s is None else np.asarray(hrtf.delays_s[index], dtype=np.float64)
    if np.any(delays < 0):
        raise InvalidArgumentError("onset delays must be non-negative")
    max_delay = int(np.ceil(delays.max() * fs))
    length = max(1024, _next_power_of_two(nfft + max_delay + 4 * int(np.ceil(max_lag_s * fs))))

    sos = signal.butter(LOWPASS_ORDER, lowpass_hz, btype='low', fs=fs, output='sos')
    freqs = np.fft.rfftfreq(length)
    responses = []
    for ear in range(2):
        impulse = np.zeros(length)
        impulse[:nfft] = minimum_phase_response(_one_sided(hrtf.magnitudes[index, ear]), nfft)
        if delays[ear] != 0.0:
            shift = np.exp(-2j * np.pi * freqs * delays[ear] * fs)
            impulse = np.fft.irfft(np.fft.rfft(impulse) * shift, length)
        responses.append(signal.sosfilt(sos, impulse))
    return responses[0], responses[1]


def _parabolic_offset(left: float, centre: float, right: float) -> float:
    denominator = left - 2.0 * centre + right
    if denominator == 0.0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denominator, -0.5, 0.5))


def itd_estimate(hrtf: HRTFSet, index: int, lowpass_hz: Optional[float] = None,
                 max_lag_s: Optional[float] = None) -> float:
    """Interaural time difference of one direction in microseconds"""
    max_lag_s = settings.evaluation.itd_max_lag_s if max_lag_s is None else max_lag_s
    left, right = binaural_responses(hrtf, index, lowpass_hz, max_lag_s)
    fs = hrtf.sample_rate_hz

    correlation = signal.correlate(right, left, mode='full', method='direct')
    lags = signal.correlation_lags(right.size, left.size, mode='full')
    max_lag = int(round(max_lag_s * fs))
    window = np.flatnonzero(np.abs(lags) <= max_lag)
    peak = window[int(np.argmax(correlation[window]))]

    offset = 0.0
    if window[0] < peak < window[-1]:
        offset = _parabolic_offset(correlation[peak - 1], correlation[peak], correlation[peak + 1])
    return (lags[peak] + offset) * 1e6 / fs


def itd_profile(hrtf: HRTFSet, lowpass_hz: Optional[float] = None, max_lag_s: Optional[float] = None) -> np.ndarray:
    return np.array([itd_estimate(hrtf, n, lowpass_hz, max_lag_s) for n in range(hrtf.n_directions)])


def itd_metric(G: HRTFSet, HR: HRTFSet, lowpass_hz: Optional[float] = None,
               max_lag_s: Optional[float] = None) -> float:
    """Mean absolute ITD difference over directions, microseconds"""
    if not G.grid.same_directions(HR.grid):
        raise InvalidArgumentError("generated and reference sets are on different grids")
    diff = itd_profile(G, lowpass_hz, max_lag_s) - itd_profile(HR, lowpass_hz, max_lag_s)
    return float(np.mean(np.abs(diff)))


def per_direction_lsd(G: HRTFSet, HR: HRTFSet) -> np.ndarray:
    """LSD of every direction (averaged over ears), dB"""
    if not G.grid.same_directions(HR.grid) or G.n_bins != HR.n_bins:
        raise InvalidArgumentError("generated and reference sets are not comparable")
    diff = HR.magnitudes_db - G.magnitudes_db
    return np.sqrt(np.mean(diff * diff, axis=2)).mean(axis=1)
