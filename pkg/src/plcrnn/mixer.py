"""Synthetic corpus fabrication, SNR-controlled mixing, WAV I/O and SDR."""

import os
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, AudioSignal
from .seeding import stream

SNR_GRID = tuple(range(-5, 11))
SDR_CAP = 100.0


class MixError(ValueError):
    pass


class WavFormatError(OSError):
    pass


@dataclass
class MixSpec:
    clean_id: str
    noise_id: str
    snr_db: float
    cut_point: int
    seed: int
    wrapped: bool = False


@dataclass
class UtterancePair:
    noisy: AudioSignal
    clean: AudioSignal
    noise: AudioSignal  # already scaled: noisy == clean + noise
    snr_db: float
    meta: dict = field(default_factory=dict)


def power(x):
    x = x.samples if isinstance(x, AudioSignal) else np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def measured_snr(clean, noise):
    return 10.0 * np.log10(power(clean) / power(noise))


def _arr(x):
    return x.samples if isinstance(x, AudioSignal) else np.asarray(x, dtype=np.float64)


def mix_at_snr(clean, noise, snr_db, meta=None):
    c, n = _arr(clean), _arr(noise)
    if len(c) != len(n):
        raise MixError(f"clean has {len(c)} samples, noise has {len(n)}")
    pc, pn = power(c), power(n)
    if pc <= 0:
        raise MixError("clean signal has zero power")
    if pn <= 0:
        raise MixError("noise signal has zero power")
    if not np.isfinite(snr_db):
        raise MixError(f"snr_db must be finite, got {snr_db}")
    g = np.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0)))
    noisy = c + n * g
    # re-derived so that noisy - clean == noise and clean + noise == noisy both hold bitwise
    scaled = noisy - c
    return UtterancePair(AudioSignal(noisy), AudioSignal(c.copy()), AudioSignal(scaled),
                         float(snr_db), dict(meta or {}))


def make_improved_mixture(pair, delta_db):
    """Remix ``pair`` so that its SNR rises by ``delta_db`` (``inf`` gives clean)."""
    if delta_db < 0:
        raise MixError(f"delta_db must be >= 0, got {delta_db}")
    if delta_db == 0:
        return AudioSignal(pair.noisy.samples.copy())
    if np.isinf(delta_db):
        return AudioSignal(pair.clean.samples.copy())
    g = 10.0 ** (-delta_db / 20.0)
    return AudioSignal(pair.clean.samples + pair.noise.samples * g)


def sdr(reference, estimate):
    """Projection (scale-invariant) SDR in dB, capped at +100 dB."""
    r, e = _arr(reference), _arr(estimate)
    if len(r) != len(e):
        raise MixError(f"reference has {len(r)} samples, estimate has {len(e)}")
    rr = float(r @ r)
    if rr <= 0:
        raise MixError("reference signal has zero power")
    target = (float(e @ r) / rr) * r
    resid = e - target
    num, den = float(target @ target), float(resid @ resid)
    if den <= num * 10 ** (-SDR_CAP / 10):
        return SDR_CAP
    if num <= 0:
        return -SDR_CAP
    return float(min(10 * np.log10(num / den), SDR_CAP))


def cut_noise(noise, length, rng):
    """Take ``length`` samples of ``noise`` from a random cut point.

    Returns ``(segment, cut_point, wrapped)``; wrapping around the end is
    permitted when the noise is shorter than ``cut_point + length``.
    """
    n = _arr(noise)
    cut = int(rng.integers(0, len(n)))
    wrapped = cut + length > len(n)
    idx = (cut + np.arange(length)) % len(n)
    return n[idx], cut, bool(wrapped)


# -- synthetic signals ---------------------------------------------------------

def _envelope(n, rng):
    """Syllable-like on/off envelope with raised-cosine edges and silences."""
    env = np.zeros(n)
    pos = int(rng.integers(0, SAMPLE_RATE // 10))
    ramp = SAMPLE_RATE // 100
    while pos < n:
        dur = int(rng.integers(SAMPLE_RATE // 10, SAMPLE_RATE // 3))
        end = min(pos + dur, n)
        seg = np.ones(end - pos)
        r = min(ramp, len(seg) // 2)
        if r > 0:
            edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            seg[:r] *= edge
            seg[len(seg) - r:] *= edge[::-1]
        env[pos:end] = seg * rng.uniform(0.5, 1.0)
        pos = end + int(rng.integers(SAMPLE_RATE // 20, SAMPLE_RATE // 5))
    if not env.any():
        env[:] = 1.0
    return env


def synth_speech(n, rng):
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(100, 300)
    vib = 1 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * f0 * np.cumsum(vib) / SAMPLE_RATE
    x = np.zeros(n)
    for _ in range(int(rng.integers(2, 5))):
        k = int(rng.integers(1, 9))
        am = 1 + 0.5 * np.sin(2 * np.pi * rng.uniform(2, 8) * t + rng.uniform(0, 2 * np.pi))
        x += rng.uniform(0.3, 1.0) / k ** 0.5 * am * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    x *= _envelope(n, rng)
    return 0.05 * x / np.sqrt(np.mean(x * x))


NOISE_KINDS = ("white", "pink", "am_tone")


def synth_noise(kind, n, rng):
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(len(spec), dtype=np.float64)
        f[0] = 1.0
        x = np.fft.irfft(spec / np.sqrt(f), n=n)
    elif kind == "am_tone":
        t = np.arange(n) / SAMPLE_RATE
        carrier = np.sin(2 * np.pi * rng.uniform(300, 3000) * t + rng.uniform(0, 2 * np.pi))
        x = (1 + 0.8 * np.sin(2 * np.pi * rng.uniform(0.5, 4) * t)) * carrier
        x += 0.05 * rng.standard_normal(n)
    else:
        raise MixError(f"unknown noise kind {kind!r}")
    return 0.05 * x / np.sqrt(np.mean(x * x))


def synth_corpus(n_utts, seed, snr_grid=SNR_GRID, min_dur=0.5, max_dur=2.0, noise_kinds=NOISE_KINDS):
    """Deterministic synthetic stand-in for a clean/noise corpus.

    Each utterance gets its own sub-stream, so the result is a pure
    function of ``(n_utts, seed)`` and the generation options.
    """
    if n_utts < 1:
        raise MixError("n_utts must be >= 1")
    pairs = []
    for u in range(n_utts):
        rng = stream(f"corpus/{u}", seed)
        n = int(rng.integers(int(min_dur * SAMPLE_RATE), int(max_dur * SAMPLE_RATE) + 1))
        clean = synth_speech(n, rng)
        kind = noise_kinds[int(rng.integers(0, len(noise_kinds)))]
        long_noise = synth_noise(kind, n + SAMPLE_RATE, rng)
        seg, cut, wrapped = cut_noise(long_noise, n, rng)
        snr = float(snr_grid[int(rng.integers(0, len(snr_grid)))])
        spec = MixSpec(f"utt{u:05d}", kind, snr, cut, int(seed), wrapped)
        pairs.append(mix_at_snr(clean, seg, snr, meta=vars(spec)))
    return pairs


# -- WAV -----------------------------------------------------------------------

def _wave_target(path):
    # wave accepts file objects directly; only path-likes need converting
    return os.fspath(path) if isinstance(path, (str, os.PathLike)) else path


def write_wav(path, signal):
    """Write 16-bit PCM mono 16 kHz; samples outside [-1, 1) are clipped."""
    if isinstance(signal, AudioSignal):
        rate, x = signal.sample_rate, signal.samples
    else:
        rate, x = SAMPLE_RATE, np.asarray(signal, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(_wave_target(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def read_wav(path):
    try:
        w = wave.open(_wave_target(path), "rb")
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    with w:
        ch, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
        if ch != 1:
            raise WavFormatError(f"{path}: expected mono, file has {ch} channels")
        if width != 2:
            raise WavFormatError(f"{path}: expected 16-bit PCM, file has {8 * width}-bit samples")
        if rate != SAMPLE_RATE:
            raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, file is {rate} Hz")
        data = w.readframes(w.getnframes())
    return AudioSignal(np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0, rate)


# -- on-disk corpus ------------------------------------------------------------

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = ("utt_id", "clean_path", "noise_path", "noisy_path", "noise_id", "snr_db", "cut_point", "seed")


def write_corpus(pairs, out_dir):
    """Write WAV triples and a tab-separated manifest.

    Manifest columns: utt_id, clean/noise/noisy paths (relative to the
    corpus directory), noise_id, snr_db, cut_point, seed. ``noise_path``
    holds the already-scaled noise.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(MANIFEST_HEADER)]
    for p in pairs:
        uid = p.meta.get("clean_id", f"utt{len(lines) - 1:05d}")
        names = [f"{uid}_clean.wav", f"{uid}_noise.wav", f"{uid}_noisy.wav"]
        for name, sig in zip(names, (p.clean, p.noise, p.noisy)):
            write_wav(out / name, sig)
        lines.append("\t".join([uid, *names, str(p.meta.get("noise_id", "")), f"{p.snr_db:g}",
                                str(p.meta.get("cut_point", 0)), str(p.meta.get("seed", 0))]))
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(corpus_dir):
    path = Path(corpus_dir) / MANIFEST
    rows = path.read_text().splitlines()
    if not rows or tuple(rows[0].split("\t")) != MANIFEST_HEADER:
        raise MixError(f"{path}: missing or malformed manifest header")
    return [dict(zip(MANIFEST_HEADER, r.split("\t"))) for r in rows[1:] if r.strip()]


def load_corpus(corpus_dir):
    """Rebuild pairs from disk, remixing so the labelled SNR holds exactly."""
    base = Path(corpus_dir)
    pairs = []
    for row in read_manifest(base):
        clean = read_wav(base / row["clean_path"])
        noise = read_wav(base / row["noise_path"])
        meta = {"clean_id": row["utt_id"], "noise_id": row["noise_id"],
                "cut_point": int(row["cut_point"]), "seed": int(row["seed"])}
        pairs.append(mix_at_snr(clean, noise, float(row["snr_db"]), meta=meta))
    return pairs
