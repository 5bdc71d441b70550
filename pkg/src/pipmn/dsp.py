"""Audio front end: WAV parsing, resampling, framing and cepstral features.

A 4 second clip at 22050 Hz becomes a (399, 100) matrix made of five
20-coefficient cepstra stacked side by side, in the order
NGCC | MFCC | GFCC | LFCC | BFCC.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct

SAMPLE_RATE = 22050
WIN_SECONDS = 0.025
HOP_SECONDS = 0.01
FFT_SIZE = 1024
N_FILTERS = 40
N_COEFF = 20
LOG_FLOOR = 1e-10
STACK_ORDER = ("gammachirp", "mel", "gammatone", "linear", "bark")
FEATURE_KINDS = {"stack": 100, "mfcc50": 50, "mel100": 100}


class WavError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass
class FilterbankSpec:
    family: str
    n_filters: int = N_FILTERS
    fmin: float = 0.0
    fmax: float | None = None
    fft_size: int = FFT_SIZE
    chirp: float = -2.0

    FAMILIES = ("mel", "linear", "bark", "gammatone", "gammachirp")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise ValueError(f"unknown filterbank family {self.family!r}")
        if self.n_filters < 1:
            raise ValueError("n_filters must be >= 1")


@dataclass
class FeatureClip:
    features: np.ndarray
    clip_id: str = ""
    label: object = None
    source: tuple = field(default=("", 0))

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature matrix contains non-finite values")


# ---------------------------------------------------------------------------
# WAV input

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def load_wav(path) -> Waveform:
    """Read a PCM16 or float32 RIFF/WAVE file; stereo is averaged to mono."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_wav(raw)


def parse_wav(raw: bytes) -> Waveform:
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError("RIFF: missing RIFF/WAVE header")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            if cid == b"data":
                # tolerate truncated data chunks written by streaming encoders
                size = len(body)
            else:
                raise WavError(f"{cid.decode('latin-1')!r} chunk: truncated")
        if cid == b"fmt ":
            if size < 16:
                raise WavError("'fmt ' chunk: too short")
            tag, channels, rate, _, align, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise WavError("'fmt ' chunk: extensible format too short")
                tag = struct.unpack("<H", body[24:26])[0]
            fmt = (tag, channels, rate, align, bits)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavError("'fmt ' chunk: missing")
    if data is None:
        raise WavError("'data' chunk: missing")

    tag, channels, rate, _, bits = fmt
    if channels < 1 or rate <= 0:
        raise WavError(f"'fmt ' chunk: invalid channels={channels} rate={rate}")
    if tag == _PCM and bits == 16:
        usable = len(data) - len(data) % (2 * channels)
        x = np.frombuffer(data[:usable], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FLOAT and bits == 32:
        usable = len(data) - len(data) % (4 * channels)
        x = np.frombuffer(data[:usable], dtype="<f4").astype(np.float64)
    else:
        raise WavError(f"'fmt ' chunk: unsupported codec (format tag {tag}, {bits} bits)")
    x = x.reshape(-1, channels).mean(axis=1)
    return Waveform(x, rate)


def write_wav(path, samples, sample_rate, float32=False, channels=1):
    """Write mono or interleaved multichannel audio (test fixtures, demos)."""
    x = np.asarray(samples, dtype=np.float64)
    if float32:
        payload, tag, bits = x.astype("<f4").tobytes(), _FLOAT, 32
    else:
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload, tag, bits = q.tobytes(), _PCM, 16
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt \
        + b"data" + struct.pack("<I", len(payload)) + payload
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# time-domain plumbing


def resample(w: Waveform, target_hz: int = SAMPLE_RATE) -> Waveform:
    """Linear-interpolation resampling; output length is round(N * target / source).

    Output sample k sits at input position k * source / target; positions past
    the last input sample hold the last value.
    """
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    n = len(w.samples)
    if n == 0:
        raise ValueError("cannot resample an empty waveform")
    if target_hz == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    m = int(round(n * target_hz / w.sample_rate))
    pos = np.arange(m) * (w.sample_rate / target_hz)
    return Waveform(np.interp(pos, np.arange(n), w.samples), target_hz)


def segment_clip(w: Waveform, seconds: float = 4.0) -> list[Waveform]:
    """Cut into back-to-back windows of ``seconds``.

    Clips shorter than one window become a single zero-padded segment. A
    trailing remainder shorter than a window is dropped once at least one full
    window exists, so a 30 s track gives 7 segments of 4 s.
    """
    if seconds <= 0:
        raise ValueError("segment length must be positive")
    size = int(round(seconds * w.sample_rate))
    x = w.samples
    if len(x) < size:
        return [Waveform(np.pad(x, (0, size - len(x))), w.sample_rate)]
    return [Waveform(x[i * size:(i + 1) * size].copy(), w.sample_rate)
            for i in range(len(x) // size)]


def frame_geometry(sample_rate=SAMPLE_RATE, win_s=WIN_SECONDS, hop_s=HOP_SECONDS):
    """(window, hop) in samples, both rounded down."""
    return int(np.floor(win_s * sample_rate + 1e-9)), int(np.floor(hop_s * sample_rate + 1e-9))


def n_frames(n_samples, sample_rate=SAMPLE_RATE, win_s=WIN_SECONDS, hop_s=HOP_SECONDS):
    win, hop = frame_geometry(sample_rate, win_s, hop_s)
    if n_samples < win:
        return 0
    return 1 + (n_samples - win) // hop


def stft_power(w: Waveform, win_s=WIN_SECONDS, hop_s=HOP_SECONDS, fft=FFT_SIZE) -> np.ndarray:
    """One-sided power spectrogram of Hamming-windowed frames, (frames, fft//2+1)."""
    win, hop = frame_geometry(w.sample_rate, win_s, hop_s)
    if win > fft:
        raise ValueError(f"window of {win} samples exceeds fft size {fft}")
    frames = n_frames(len(w.samples), w.sample_rate, win_s, hop_s)
    if frames == 0:
        raise ValueError(f"clip of {len(w.samples)} samples is shorter than one window ({win})")
    idx = np.arange(win)[None, :] + hop * np.arange(frames)[:, None]
    spec = np.fft.rfft(w.samples[idx] * np.hamming(win), n=fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


# ---------------------------------------------------------------------------
# filterbanks


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hz_to_bark(f):
    f = np.asarray(f, dtype=np.float64)
    return 26.81 * f / (1960.0 + f) - 0.53


def bark_to_hz(z):
    z = np.asarray(z, dtype=np.float64)
    return 1960.0 * (z + 0.53) / (26.28 - z)


def erb(f):
    return 24.7 * (4.37 * np.asarray(f, dtype=np.float64) / 1000.0 + 1.0)


def hz_to_erb_rate(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def erb_rate_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


_SCALES = {
    "mel": (hz_to_mel, mel_to_hz),
    "linear": (lambda f: np.asarray(f, dtype=np.float64), lambda f: np.asarray(f, dtype=np.float64)),
    "bark": (hz_to_bark, bark_to_hz),
    "gammatone": (hz_to_erb_rate, erb_rate_to_hz),
    "gammachirp": (hz_to_erb_rate, erb_rate_to_hz),
}


def triangle(freqs, lo, center, hi):
    """Unit-peak triangle with feet at ``lo``/``hi`` and apex at ``center``."""
    freqs = np.asarray(freqs, dtype=np.float64)
    up = (freqs - lo) / (center - lo)
    down = (hi - freqs) / (hi - center)
    return np.maximum(0.0, np.minimum(up, down))


def gammatone_magnitude(freqs, center, order=4):
    """Magnitude response of an order-4 gammatone filter (bandwidth 1.019 ERB)."""
    b = 1.019 * erb(center)
    return (1.0 + ((np.asarray(freqs) - center) / b) ** 2) ** (-order / 2.0)


def gammachirp_magnitude(freqs, center, chirp=-2.0, order=4):
    """Gammatone magnitude times the asymmetric factor exp(c * atan((f - fc) / b))."""
    b = 1.019 * erb(center)
    theta = np.arctan((np.asarray(freqs) - center) / b)
    return gammatone_magnitude(freqs, center, order) * np.exp(chirp * theta)


def center_frequencies(spec: FilterbankSpec, sample_rate):
    """Band edges and centres, equally spaced on the family's scale: n + 2 points."""
    fmax = sample_rate / 2 if spec.fmax is None else spec.fmax
    fwd, inv = _SCALES[spec.family]
    pts = np.linspace(fwd(spec.fmin), fwd(fmax), spec.n_filters + 2)
    return inv(pts)


def build_filterbank(spec: FilterbankSpec, sample_rate=SAMPLE_RATE) -> np.ndarray:
    """Filter weights over the one-sided FFT bins, shape (n_filters, fft_size//2 + 1)."""
    fmax = sample_rate / 2 if spec.fmax is None else spec.fmax
    if not (0 <= spec.fmin < fmax <= sample_rate / 2):
        raise ValueError(f"invalid frequency range fmin={spec.fmin}, fmax={fmax} "
                         f"for sample rate {sample_rate}")
    freqs = np.arange(spec.fft_size // 2 + 1) * sample_rate / spec.fft_size
    hz = center_frequencies(spec, sample_rate)
    fb = np.zeros((spec.n_filters, freqs.size))
    for i in range(spec.n_filters):
        lo, c, hi = hz[i], hz[i + 1], hz[i + 2]
        if spec.family == "gammatone":
            row = gammatone_magnitude(freqs, c)
        elif spec.family == "gammachirp":
            row = gammachirp_magnitude(freqs, c, spec.chirp)
        else:
            row = triangle(freqs, lo, c, hi)
        if spec.family in ("gammatone", "gammachirp"):
            row = row / row.max()
        fb[i] = row
    bad = np.flatnonzero(~(fb.sum(axis=1) > 0))
    if bad.size:
        raise ValueError(f"{spec.family} filters {bad.tolist()} have empty support; "
                         f"use fewer filters or a larger fft")
    return fb


_FB_CACHE: dict = {}


def filterbank(family, sample_rate=SAMPLE_RATE, n_filters=N_FILTERS, fft=FFT_SIZE):
    key = (family, sample_rate, n_filters, fft)
    if key not in _FB_CACHE:
        fb = build_filterbank(FilterbankSpec(family, n_filters, fft_size=fft), sample_rate)
        fb.setflags(write=False)
        _FB_CACHE[key] = fb
    return _FB_CACHE[key]


# ---------------------------------------------------------------------------
# cepstra


def log_energies(power, fb):
    return np.log(power @ fb.T + LOG_FLOOR)


def cepstra(power, fb, n_coeff=N_COEFF):
    """Orthonormal DCT-II of log filterbank energies, first ``n_coeff`` kept."""
    if power.shape[1] != fb.shape[1]:
        raise ValueError(f"power has {power.shape[1]} bins but filterbank has {fb.shape[1]}")
    if n_coeff > fb.shape[0]:
        raise ValueError(f"cannot keep {n_coeff} coefficients from {fb.shape[0]} filters")
    return dct(log_energies(power, fb), type=2, norm="ortho", axis=1)[:, :n_coeff]


def _check_rate(w):
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"features expect {SAMPLE_RATE} Hz audio, got {w.sample_rate}; resample first")


def extract_stack(w: Waveform, clip_id="", label=None, source=("", 0)) -> FeatureClip:
    """NGCC | MFCC | GFCC | LFCC | BFCC, each (frames, 20), as one (frames, 100) clip."""
    _check_rate(w)
    power = stft_power(w)
    cols = [cepstra(power, filterbank(fam)) for fam in STACK_ORDER]
    return FeatureClip(np.concatenate(cols, axis=1), clip_id, label, source)


def extract_mfcc(w: Waveform, n_coeff=50, n_filters=128) -> np.ndarray:
    _check_rate(w)
    return cepstra(stft_power(w), filterbank("mel", n_filters=n_filters), n_coeff).astype(np.float32)


def extract_log_mel(w: Waveform, n_mels=100) -> np.ndarray:
    _check_rate(w)
    return log_energies(stft_power(w), filterbank("mel", n_filters=n_mels)).astype(np.float32)


def extract(w: Waveform, kind="stack") -> np.ndarray:
    """Feature matrix for one 22050 Hz segment; ``kind`` is stack, mfcc50 or mel100."""
    if kind == "stack":
        return extract_stack(w).features
    if kind == "mfcc50":
        return extract_mfcc(w)
    if kind == "mel100":
        return extract_log_mel(w)
    raise ValueError(f"unknown feature kind {kind!r}; expected one of {sorted(FEATURE_KINDS)}")


# ---------------------------------------------------------------------------
# PIPF cache files

PIPF_MAGIC = b"PIPF"
PIPF_VERSION = 1


def write_pipf(path, features) -> None:
    x = np.ascontiguousarray(features, dtype="<f4")
    if x.ndim != 2:
        raise ValueError(f"PIPF stores 2-D matrices, got shape {x.shape}")
    with open(path, "wb") as fh:
        fh.write(PIPF_MAGIC + struct.pack("<III", PIPF_VERSION, *x.shape) + x.tobytes())


def read_pipf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PIPF_MAGIC:
        raise ValueError(f"{path}: not a PIPF file (bad magic)")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated PIPF header")
    version, frames, dims = struct.unpack("<III", raw[4:16])
    if version != PIPF_VERSION:
        raise ValueError(f"{path}: unsupported PIPF version {version}")
    if len(raw) != 16 + 4 * frames * dims:
        raise ValueError(f"{path}: payload size does not match {frames}x{dims}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(frames, dims).astype(np.float32)
