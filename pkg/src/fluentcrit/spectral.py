"""Audio-to-mel front end and the MELF interchange format.

The mel-spectrogram produced here is the acoustic currency of the whole
package: ``n_frames x n_mels`` natural-log mel energies, where row ``i``
starts at time ``i * hop_size / sample_rate_hz`` seconds.

Pipeline: reflect-pad by ``n_fft/2`` on each side, Hann-windowed magnitude
STFT, HTK-scale triangular mel filterbank (area-normalized), floor at
``log_floor``, natural log.  Frame count is ``floor(len(samples)/hop) + 1``.
"""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigMismatch, EmptyInput, FormatError

MELF_MAGIC = b"MELF"
MELF_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIIIfff")  # magic, version, frames, mels, sr, hop, nfft, win, fmin, fmax, floor


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with its sample rate.

    Samples are real amplitudes, nominally in [-1, 1]; all must be finite.
    """

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if samples.size and not np.isfinite(samples).all():
            raise ValueError("samples contain non-finite values")


@dataclass(frozen=True)
class MelConfig:
    """STFT and filterbank parameters.

    Defaults follow common TTS practice for 22050 Hz source audio.
    """

    sample_rate_hz: int = 22050
    n_fft: int = 1024
    hop_size: int = 256
    win_size: int = 1024
    n_mels: int = 80
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not (0 < self.hop_size <= self.win_size <= self.n_fft):
            raise ValueError(
                f"need 0 < hop_size <= win_size <= n_fft, got "
                f"hop={self.hop_size} win={self.win_size} n_fft={self.n_fft}"
            )
        if self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if not (0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2):
            raise ValueError(
                f"need 0 <= fmin < fmax <= sr/2, got fmin={self.fmin_hz} "
                f"fmax={self.fmax_hz} sr={self.sample_rate_hz}"
            )
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate_hz / self.hop_size


@dataclass
class MelSpectrogram:
    """``n_frames x n_mels`` matrix of natural-log mel energies."""

    data: np.ndarray
    config: MelConfig

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"mel data must be 2-D, got shape {data.shape}")
        if data.shape[1] != self.config.n_mels:
            raise ValueError(
                f"mel data has {data.shape[1]} bins but config says {self.config.n_mels}"
            )
        if data.size and not np.isfinite(data).all():
            raise ValueError("mel data contains non-finite values")
        self.data = data

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_mels(self) -> int:
        return self.data.shape[1]

    def frame_time(self, i: int) -> float:
        """Start time of frame ``i`` in seconds."""
        return i * self.config.hop_size / self.config.sample_rate_hz


def hz_to_mel(f):
    """HTK mel scale: m = 2595 * log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    """Inverse HTK mel scale."""
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers(cfg: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Area-normalized triangular filterbank, shape (n_mels, n_fft//2 + 1)."""
    fft_freqs = np.arange(cfg.n_fft // 2 + 1) * (cfg.sample_rate_hz / cfg.n_fft)
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    hz = mel_to_hz(mels)
    lower, center, upper = hz[:-2], hz[1:-1], hz[2:]

    up = (fft_freqs[None, :] - lower[:, None]) / (center - lower)[:, None]
    down = (upper[:, None] - fft_freqs[None, :]) / (upper - center)[:, None]
    fb = np.maximum(0.0, np.minimum(up, down))
    # Normalize each triangle to unit area over Hz.
    fb *= (2.0 / (upper - lower))[:, None]
    return fb


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def compute_mel(clip: AudioClip, cfg: MelConfig) -> MelSpectrogram:
    """Convert a waveform into a log-mel spectrogram.

    The signal is reflect-padded by ``n_fft/2`` samples on each side, so the
    output always has ``floor(len(samples)/hop_size) + 1`` frames and frame
    ``i`` is anchored at sample ``i * hop_size``.

    Raises EmptyInput for an empty clip and ConfigMismatch when the clip's
    sample rate differs from the config's.
    """
    if clip.samples.size == 0:
        raise EmptyInput("cannot compute a mel-spectrogram of an empty clip")
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        raise ConfigMismatch(
            f"clip is {clip.sample_rate_hz} Hz but config expects {cfg.sample_rate_hz} Hz"
        )

    x = clip.samples
    pad = cfg.n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    n_frames = len(x) // cfg.hop_size + 1

    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)
    frames = frames[:: cfg.hop_size][:n_frames]

    window = _hann_periodic(cfg.win_size)
    if cfg.win_size < cfg.n_fft:
        left = (cfg.n_fft - cfg.win_size) // 2
        window = np.pad(window, (left, cfg.n_fft - cfg.win_size - left))

    magnitude = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1))
    mel = magnitude @ mel_filterbank(cfg).T
    log_mel = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(log_mel.astype(np.float32), cfg)


def read_wav(source) -> AudioClip:
    """Load a PCM 16-bit mono WAV file (path or binary stream).

    Anything else (other widths, stereo, compressed) is rejected with
    FormatError.
    """
    try:
        with wave.open(source, "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise FormatError(f"compressed WAV ({wf.getcomptype()}) not supported")
            if wf.getnchannels() != 1:
                raise FormatError(f"WAV must be mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise FormatError(
                    f"WAV must be 16-bit PCM, got {8 * wf.getsampwidth()}-bit"
                )
            sr = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise FormatError(f"not a readable WAV file: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, sr)


def write_wav(clip: AudioClip, sink) -> None:
    """Write an AudioClip as PCM 16-bit mono WAV (path or binary stream)."""
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(sink, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate_hz)
        wf.writeframes(pcm.tobytes())


def write_mel(mel: MelSpectrogram, sink) -> None:
    """Serialize a spectrogram in the MELF binary format (little-endian).

    Layout: magic "MELF" | version u16 | n_frames u32 | n_mels u32 |
    sample_rate u32 | hop u32 | n_fft u32 | win u32 | fmin f32 | fmax f32 |
    log_floor f32 | data f32[n_frames * n_mels] row-major.
    """
    cfg = mel.config
    header = _HEADER.pack(
        MELF_MAGIC,
        MELF_VERSION,
        mel.n_frames,
        mel.n_mels,
        cfg.sample_rate_hz,
        cfg.hop_size,
        cfg.n_fft,
        cfg.win_size,
        cfg.fmin_hz,
        cfg.fmax_hz,
        cfg.log_floor,
    )
    payload = np.ascontiguousarray(mel.data, dtype="<f4").tobytes()
    if hasattr(sink, "write"):
        sink.write(header)
        sink.write(payload)
    else:
        with open(sink, "wb") as fh:
            fh.write(header)
            fh.write(payload)


def read_mel(source) -> MelSpectrogram:
    """Parse a MELF stream back into a MelSpectrogram.

    Raises FormatError carrying the byte offset of the first problem.
    """
    if hasattr(source, "read"):
        blob = source.read()
    else:
        with open(source, "rb") as fh:
            blob = fh.read()

    if len(blob) < _HEADER.size:
        raise FormatError("truncated MELF header", offset=len(blob))
    magic, version, n_frames, n_mels, sr, hop, n_fft, win, fmin, fmax, floor = _HEADER.unpack_from(blob)
    if magic != MELF_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != MELF_VERSION:
        raise FormatError(f"unsupported MELF version {version}", offset=4)

    expected = n_frames * n_mels * 4
    got = len(blob) - _HEADER.size
    if got != expected:
        raise FormatError(
            f"payload holds {got} bytes, header promises {expected}",
            offset=len(blob) if got < expected else _HEADER.size + expected,
        )
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(n_frames, n_mels)
    bad = ~np.isfinite(data)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError("non-finite value in payload", offset=_HEADER.size + 4 * first)

    try:
        cfg = MelConfig(
            sample_rate_hz=sr,
            n_fft=n_fft,
            hop_size=hop,
            win_size=win,
            n_mels=n_mels,
            fmin_hz=fmin,
            fmax_hz=fmax,
            log_floor=floor,
        )
    except ValueError as exc:
        raise FormatError(f"inconsistent header: {exc}", offset=6) from exc
    return MelSpectrogram(data.copy(), cfg)


def mel_to_bytes(mel: MelSpectrogram) -> bytes:
    buf = io.BytesIO()
    write_mel(mel, buf)
    return buf.getvalue()


def mel_from_bytes(blob: bytes) -> MelSpectrogram:
    return read_mel(io.BytesIO(blob))
