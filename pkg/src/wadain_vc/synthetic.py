"""Synthetic speakers for smoke runs: feature-level utterances whose speaker
identity lives in a distinct spectral band of the MCEP vector."""
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import acoustic_features as af
from .data_manifest import EVAL, TRAIN, Manifest, UtteranceRecord, compute_speaker_stats


def speaker_signature(k: int, n_speakers: int, dim: int, amplitude: float = 1.5) -> np.ndarray:
    """Raised-cosine bump over speaker k's share of the coefficient axis (c0 excluded)."""
    edges = np.linspace(1, dim, n_speakers + 1)
    lo, hi = edges[k], edges[k + 1]
    idx = np.arange(dim, dtype=np.float64)
    inside = (idx >= lo) & (idx < hi)
    sig = np.zeros(dim)
    sig[inside] = amplitude * np.sin(np.pi * (idx[inside] - lo + 0.5) / (hi - lo)) ** 2
    return sig


def toy_utterance(k: int, n_speakers: int, frames: int, dim: int, rng: np.random.Generator) -> dict:
    content = gaussian_filter1d(rng.standard_normal((frames, dim)), sigma=3.0, axis=0) * 2.0
    content *= np.exp(-np.arange(dim) / 12.0)  # cepstral decay
    mcep = content + speaker_signature(k, n_speakers, dim)
    mcep[:, 0] -= 3.0
    f0_base = 110.0 * 1.5 ** k
    f0 = f0_base * np.exp(0.05 * gaussian_filter1d(rng.standard_normal(frames), 5.0))
    f0[rng.random(frames) < 0.2] = 0.0
    return {"mcep": mcep.astype(np.float32), "f0": f0,
            "ap": np.zeros((frames, af.FFT_SIZE // 2 + 1), np.float32)}


def make_toy_manifest(out_dir, n_speakers: int = 2, n_train: int = 3, n_eval: int = 0,
                      frames: int = 160, dim: int = 37, seed: int = 0) -> Manifest:
    """Write feature caches for ``n_speakers`` x (``n_train`` + ``n_eval``) utterances."""
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    records = []
    table = {f"spk{k}": k for k in range(n_speakers)}
    for spk, k in table.items():
        (out / spk).mkdir(parents=True, exist_ok=True)
        for u in range(n_train + n_eval):
            feats = toy_utterance(k, n_speakers, frames, dim, rng)
            path = out / spk / f"utt{u:03d}.npz"
            af.save_feature_cache(path, feats["mcep"], feats["f0"], feats["ap"], af.FRAME_PERIOD,
                                  af.SAMPLE_RATE, source_hash=f"synthetic:{seed}")
            records.append(UtteranceRecord(
                utt_id=f"{spk}/utt{u:03d}", speaker=spk, speaker_index=k, audio_path="",
                split=TRAIN if u < n_train else EVAL, n_frames=frames, feature_cache_path=str(path),
                source_hash=f"synthetic:{seed}"))
    m = Manifest(records=records, speaker_table=table,
                 provenance={"synthetic": {"n_speakers": n_speakers, "n_train": n_train,
                                           "n_eval": n_eval, "frames": frames, "seed": seed}})
    return compute_speaker_stats(m)
