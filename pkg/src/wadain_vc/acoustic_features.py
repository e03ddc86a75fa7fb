"""Waveform <-> feature conversion around the WORLD vocoder.

Analysis/synthesis is delegated to pyworld; mel-cepstral coding to pysptk;
loudness measurement to pyloudnorm. The non-neural conversion steps (log-F0
linear transform, loudness normalization) live here as well.
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pyloudnorm
import pysptk
import pyworld
import soundfile as sf

logger = logging.getLogger(__name__)

SAMPLE_RATE = 22050
FRAME_PERIOD = 5.0
MCEP_ORDER = 36
FFT_SIZE = 1024
LOUDNESS_TARGET = -23.0
SUPPORTED_RATES = (16000, 22050, 24000, 44100, 48000)


@dataclass
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    frame_period: float = FRAME_PERIOD
    mcep_order: int = MCEP_ORDER
    fft_size: int = FFT_SIZE
    f0_floor: float = 71.0
    f0_ceil: float = 800.0
    f0_method: str = "dio"
    loudness_target: float = LOUDNESS_TARGET

    @property
    def fft_bins(self) -> int:
        return self.fft_size // 2 + 1

    def validate(self):
        if self.sample_rate not in SUPPORTED_RATES:
            raise ValueError(f"features.sample_rate {self.sample_rate} not in {SUPPORTED_RATES}")
        if self.frame_period <= 0 or self.mcep_order < 1 or self.fft_size < 64:
            raise ValueError("features: frame_period > 0, mcep_order >= 1 and fft_size >= 64 required")
        if self.f0_method not in ("dio", "harvest"):
            raise ValueError(f"features.f0_method must be 'dio' or 'harvest', got {self.f0_method!r}")


class AnalysisError(RuntimeError):
    pass


class FeatureError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise FeatureError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise FeatureError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class VocoderAnalysis:
    f0: np.ndarray
    spectral_envelope: np.ndarray
    aperiodicity: np.ndarray
    frame_period: float = FRAME_PERIOD
    sample_rate: int = SAMPLE_RATE
    # length of the analysed signal; synthesis trims to it when known
    n_samples: Optional[int] = None

    @property
    def n_frames(self) -> int:
        return len(self.f0)

    def validate(self):
        n = len(self.f0)
        if self.spectral_envelope.shape[0] != n or self.aperiodicity.shape[0] != n:
            raise FeatureError(
                f"frame count mismatch: f0={n}, envelope={self.spectral_envelope.shape[0]}, "
                f"aperiodicity={self.aperiodicity.shape[0]}")
        if self.frame_period <= 0:
            raise FeatureError("frame_period must be positive")
        if np.any(self.f0 < 0):
            raise FeatureError("negative f0")


@dataclass
class McepSegment:
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs))
        if self.coeffs.shape[0] < 1:
            raise FeatureError("McepSegment needs at least one frame")

    @property
    def order(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[0]


@dataclass
class LogF0Stats:
    mean: float
    std: float
    n_voiced: int

    @property
    def defined(self) -> bool:
        return self.n_voiced > 0

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "n_voiced": self.n_voiced}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["mean"]), float(d["std"]), int(d["n_voiced"]))


def mcep_alpha(sample_rate: int) -> float:
    return float(pysptk.util.mcepalpha(sample_rate))


def analyze(w: Waveform, frame_period: float = FRAME_PERIOD, fft_size: int = FFT_SIZE,
            f0_floor: float = 71.0, f0_ceil: float = 800.0, f0_method: str = "dio",
            utt_id: str = "<unnamed>") -> VocoderAnalysis:
    """Decompose a waveform into F0, spectral envelope and aperiodicity.

    ``f0_method`` is ``"dio"`` (dio + stonemask refinement) or ``"harvest"``.
    Backend failures are re-raised as :class:`AnalysisError` carrying ``utt_id``.
    """
    if len(w.samples) == 0:
        raise AnalysisError(f"{utt_id}: empty waveform")
    if w.sample_rate not in SUPPORTED_RATES:
        raise AnalysisError(f"{utt_id}: unsupported sample rate {w.sample_rate}")
    x = np.ascontiguousarray(w.samples, dtype=np.float64)
    fs = w.sample_rate
    try:
        if f0_method == "harvest":
            f0, t = pyworld.harvest(x, fs, frame_period=frame_period, f0_floor=f0_floor, f0_ceil=f0_ceil)
        elif f0_method == "dio":
            f0, t = pyworld.dio(x, fs, frame_period=frame_period, f0_floor=f0_floor, f0_ceil=f0_ceil)
            f0 = pyworld.stonemask(x, f0, t, fs)
        else:
            raise ValueError(f"unknown f0_method {f0_method!r}")
        sp = pyworld.cheaptrick(x, f0, t, fs, fft_size=fft_size)
        ap = pyworld.d4c(x, f0, t, fs, fft_size=fft_size)
    except ValueError:
        raise
    except Exception as exc:  # pyworld raises assorted C-level errors
        raise AnalysisError(f"{utt_id}: vocoder analysis failed: {exc}") from exc
    f0 = np.where(f0 > 0, f0, 0.0)
    return VocoderAnalysis(f0=f0, spectral_envelope=sp, aperiodicity=ap,
                           frame_period=frame_period, sample_rate=fs, n_samples=len(x))


def envelope_to_mcep(a: VocoderAnalysis, order: int = MCEP_ORDER) -> McepSegment:
    if order < 1:
        raise FeatureError(f"mcep order must be >= 1, got {order}")
    sp = np.ascontiguousarray(a.spectral_envelope, dtype=np.float64)
    mc = pysptk.sp2mc(sp, order=order, alpha=mcep_alpha(a.sample_rate))
    return McepSegment(np.atleast_2d(mc))


def mcep_to_envelope(m: McepSegment, fft_bins: int = FFT_SIZE // 2 + 1,
                     sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Inverse of :func:`envelope_to_mcep`; returns a frames x fft_bins power envelope."""
    if m.order < 1:
        raise FeatureError(f"mcep order must be >= 1, got {m.order}")
    if fft_bins < 2:
        raise FeatureError(f"fft_bins must be >= 2, got {fft_bins}")
    fft_len = 2 * (fft_bins - 1)
    mc = np.ascontiguousarray(m.coeffs, dtype=np.float64)
    return pysptk.mc2sp(mc, alpha=mcep_alpha(sample_rate), fftlen=fft_len)


def logf0_stats(f0) -> LogF0Stats:
    f0 = np.asarray(f0, dtype=np.float64)
    lf0 = np.log(f0[f0 > 0])
    if lf0.size == 0:
        return LogF0Stats(mean=float("nan"), std=float("nan"), n_voiced=0)
    if np.all(lf0 == lf0[0]):  # exact, so the degenerate-source branch triggers
        return LogF0Stats(mean=float(lf0[0]), std=0.0, n_voiced=int(lf0.size))
    return LogF0Stats(mean=float(lf0.mean()), std=float(lf0.std()), n_voiced=int(lf0.size))


def transform_logf0(f0, src: LogF0Stats, tgt: LogF0Stats) -> np.ndarray:
    """Linear log-F0 mapping from source to target speaker statistics.

    Unvoiced frames (0 Hz) stay 0. A degenerate source (std 0) sends every
    voiced frame to exp(tgt.mean).
    """
    if not src.defined or not tgt.defined:
        raise FeatureError("log-F0 statistics need at least one voiced frame")
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = f0 > 0
    out = np.zeros_like(f0)
    if src.std == 0:
        logger.warning("degenerate source log-F0 std; mapping voiced frames to target mean")
        out[voiced] = np.exp(tgt.mean)
        return out
    out[voiced] = np.exp(tgt.mean + tgt.std * (np.log(f0[voiced]) - src.mean) / src.std)
    return out


def synthesize(a: VocoderAnalysis) -> Waveform:
    a.validate()
    y = pyworld.synthesize(np.ascontiguousarray(a.f0, dtype=np.float64),
                           np.ascontiguousarray(a.spectral_envelope, dtype=np.float64),
                           np.ascontiguousarray(a.aperiodicity, dtype=np.float64),
                           a.sample_rate, a.frame_period)
    if a.n_samples is not None:
        y = y[:a.n_samples]
        if len(y) < a.n_samples:
            y = np.pad(y, (0, a.n_samples - len(y)))
    return Waveform(y, a.sample_rate)


def loudness(w: Waveform) -> float:
    meter = pyloudnorm.Meter(w.sample_rate)
    return float(meter.integrated_loudness(w.samples))


def normalize_loudness(w: Waveform, target_lufs: float = LOUDNESS_TARGET) -> Waveform:
    """Apply a single gain so integrated loudness (BS.1770) hits ``target_lufs``."""
    if not np.any(w.samples):
        logger.warning("digital silence; loudness normalization skipped")
        return Waveform(w.samples.copy(), w.sample_rate)
    current = loudness(w)
    if not np.isfinite(current):
        logger.warning("loudness below the gating threshold; normalization skipped")
        return Waveform(w.samples.copy(), w.sample_rate)
    gain = 10.0 ** ((target_lufs - current) / 20.0)
    out = w.samples * gain
    if np.max(np.abs(out)) > 1.0:
        logger.warning("normalized waveform exceeds full scale (peak %.3f)", np.max(np.abs(out)))
    return Waveform(out, w.sample_rate)


def read_wav(path) -> Waveform:
    data, sr = sf.read(os.fspath(path), dtype="float64", always_2d=False)
    if data.ndim > 1:
        data = data.mean(axis=1)
    return Waveform(data, sr)


def write_wav(path, w: Waveform):
    """Mono 16-bit PCM; samples beyond full scale are clipped."""
    sf.write(os.fspath(path), np.clip(w.samples, -1.0, 1.0), w.sample_rate, subtype="PCM_16")


# -- feature cache -----------------------------------------------------------

CACHE_VERSION = 1


def save_feature_cache(path, mcep: np.ndarray, f0: np.ndarray, ap: np.ndarray,
                       frame_period: float, sample_rate: int, source_hash: str = ""):
    """Write one utterance's features as an ``.npz`` container, atomically."""
    path = os.fspath(path)
    tmp = path + ".tmp.npz"
    np.savez(tmp,
             mcep=np.asarray(mcep, dtype=np.float32),
             f0=np.asarray(f0, dtype=np.float64),
             ap=np.asarray(ap, dtype=np.float32),
             frame_period=np.float64(frame_period),
             sample_rate=np.int64(sample_rate),
             source_hash=np.str_(source_hash),
             version=np.int64(CACHE_VERSION))
    os.replace(tmp, path)


def load_feature_cache(path) -> dict:
    with np.load(os.fspath(path), allow_pickle=False) as z:
        out = {k: z[k] for k in z.files}
    out["frame_period"] = float(out["frame_period"])
    out["sample_rate"] = int(out["sample_rate"])
    out["source_hash"] = str(out["source_hash"])
    out["version"] = int(out["version"])
    return out
