"""Utterance conversion: cached source features -> generator -> vocoder -> WAV."""
import numpy as np
import torch

from . import acoustic_features as af
from .data_manifest import TRAIN, Manifest, ManifestError, UtteranceRecord, load_record_features
from .networks import Models


def pad_to_multiple(x: np.ndarray, factor: int):
    """Symmetric edge padding of a T x D array so T % factor == 0; returns (padded, left)."""
    t = x.shape[0]
    extra = (-t) % factor
    left = extra // 2
    return np.pad(x, ((left, extra - left), (0, 0)), mode="edge"), left


def default_reference(m: Manifest, speaker: str) -> UtteranceRecord:
    recs = m.by_speaker(TRAIN).get(speaker)
    if not recs:
        raise ManifestError(f"no training utterances for speaker {speaker!r}")
    return max(recs, key=lambda r: (r.n_frames, r.utt_id))


@torch.no_grad()
def convert_mcep(models: Models, mcep: np.ndarray, ref_mcep: np.ndarray, target_index: int,
                 mean, std) -> np.ndarray:
    """Convert a full-length raw T x D MCEP array towards ``target_index``."""
    g, e = models.generator, models.encoder
    mean, std = np.asarray(mean, np.float32), np.asarray(std, np.float32)
    z = (np.asarray(mcep, np.float32) - mean) / std
    zr = (np.asarray(ref_mcep, np.float32) - mean) / std
    zp, left = pad_to_multiple(z, g.cfg.time_factor)
    emb = e(torch.from_numpy(zr.T[None, None].copy()), torch.tensor([target_index]))
    y = g(torch.from_numpy(zp.T[None, None].copy()), emb)[0, 0].numpy().T
    y = y[left:left + z.shape[0]]
    return y.astype(np.float64) * std + mean


def convert_utterance(models: Models, m: Manifest, src: UtteranceRecord, target: str,
                      reference: UtteranceRecord = None, cfg: af.FeatureConfig = None) -> af.Waveform:
    if target not in m.speaker_table:
        raise ManifestError(f"unknown target speaker {target!r}")
    cfg = cfg or af.FeatureConfig()
    reference = reference or default_reference(m, target)
    feats = load_record_features(src)
    ref = load_record_features(reference)
    mc = convert_mcep(models, feats["mcep"], ref["mcep"], m.speaker_table[target],
                      m.mcep_stats["mean"], m.mcep_stats["std"])
    f0 = af.transform_logf0(feats["f0"], af.LogF0Stats.from_dict(m.f0_stats[src.speaker]),
                            af.LogF0Stats.from_dict(m.f0_stats[target]))
    sp = af.mcep_to_envelope(af.McepSegment(mc), feats["ap"].shape[1], feats["sample_rate"])
    a = af.VocoderAnalysis(f0=f0, spectral_envelope=sp, aperiodicity=feats["ap"].astype(np.float64),
                           frame_period=feats["frame_period"], sample_rate=feats["sample_rate"])
    w = af.synthesize(a)
    return af.normalize_loudness(w, cfg.loudness_target)
