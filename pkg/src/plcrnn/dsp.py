"""STFT analysis and overlap-add synthesis at 16 kHz.

Frames are 320 samples (20 ms) with a 160-sample hop (10 ms), windowed
with a symmetric Hamming window and transformed to 161 one-sided bins.
The first frame starts at sample 0 (no centering), so frame ``l`` only
sees samples up to ``160 * l + 319``.
"""

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
FRAME_LENGTH = 320
HOP = 160
N_BINS = FRAME_LENGTH // 2 + 1
SYNTHESIS_FLOOR = 1e-8


class SignalError(ValueError):
    pass


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError(f"expected mono samples, got shape {self.samples.shape}")

    def __len__(self):
        return len(self.samples)


@dataclass
class Spectrogram:
    """Complex ``T x 161`` STFT plus the length of the signal it came from."""

    values: np.ndarray
    length: int | None = None

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def bins(self):
        return self.values.shape[1]

    @property
    def magnitude(self):
        return np.abs(self.values)

    @property
    def phase(self):
        return np.angle(self.values)


def hamming(n=FRAME_LENGTH):
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))


WINDOW = hamming()


def num_frames(length):
    return -(-int(length) // HOP)


def _samples(signal):
    if isinstance(signal, AudioSignal):
        if signal.sample_rate != SAMPLE_RATE:
            raise SignalError(f"sample rate must be {SAMPLE_RATE} Hz, got {signal.sample_rate}")
        return signal.samples
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise SignalError(f"expected a 1-D signal, got shape {x.shape}")
    return x


def frame_signal(x):
    """Split ``x`` into ``ceil(len/160)`` zero-padded 320-sample frames."""
    T = num_frames(len(x))
    padded = np.zeros((T - 1) * HOP + FRAME_LENGTH)
    padded[:len(x)] = x
    idx = np.arange(FRAME_LENGTH)[None, :] + HOP * np.arange(T)[:, None]
    return padded[idx]


def stft(signal):
    x = _samples(signal)
    if len(x) < 1:
        raise SignalError("empty signal")
    frames = frame_signal(x) * WINDOW
    return Spectrogram(np.fft.rfft(frames, n=FRAME_LENGTH, axis=1), length=len(x))


def direct_dft(frame):
    """One-sided DFT by the defining sum; reference for the fast path."""
    n = np.arange(len(frame))
    k = np.arange(len(frame) // 2 + 1)[:, None]
    return (frame[None, :] * np.exp(-2j * np.pi * k * n / len(frame))).sum(axis=1)


def magnitude(spec):
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    return np.abs(values)


def istft_ola(mag, phase, length=None):
    """Weighted overlap-add resynthesis from magnitude and phase.

    Each inverse frame is multiplied by the synthesis window and the sum
    is divided by ``sum_l w[n - 160 l]**2`` (floored at 1e-8), which makes
    ``istft_ola(|stft(x)|, angle(stft(x)))`` return ``x``.
    """
    mag = np.asarray(mag, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if mag.shape != phase.shape:
        raise SignalError(f"magnitude {mag.shape} and phase {phase.shape} differ")
    if mag.ndim != 2 or mag.shape[1] != N_BINS:
        raise SignalError(f"expected T x {N_BINS} spectra, got {mag.shape}")
    T = mag.shape[0]
    frames = np.fft.irfft(mag * np.exp(1j * phase), n=FRAME_LENGTH, axis=1) * WINDOW
    total = (T - 1) * HOP + FRAME_LENGTH
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = WINDOW ** 2
    for l in range(T):
        out[l * HOP:l * HOP + FRAME_LENGTH] += frames[l]
        norm[l * HOP:l * HOP + FRAME_LENGTH] += w2
    out /= np.maximum(norm, SYNTHESIS_FLOOR)
    if length is not None:
        out = out[:length]
    return AudioSignal(out)
