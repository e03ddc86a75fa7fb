"""Dataset bookkeeping: manifests, low-resource subsets, feature caches.

Manifest file format (JSON lines, UTF-8):

    line 1   {"header": {"speaker_table": {...}, "provenance": {...}, ...}}
    line 2+  one UtteranceRecord object per line
"""
import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import soundfile as sf

from . import acoustic_features as af

logger = logging.getLogger(__name__)

TRAIN, EVAL = "train", "eval"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker: str
    speaker_index: int
    audio_path: str
    split: str = TRAIN
    n_frames: int = 0
    feature_cache_path: Optional[str] = None
    source_hash: Optional[str] = None


@dataclass
class Manifest:
    records: List[UtteranceRecord]
    speaker_table: Dict[str, int]
    provenance: dict = field(default_factory=dict)
    skipped: List[dict] = field(default_factory=list)
    f0_stats: Dict[str, dict] = field(default_factory=dict)
    mcep_stats: Optional[dict] = None
    features: Optional[dict] = None

    def __len__(self):
        return len(self.records)

    @property
    def speakers(self) -> List[str]:
        return sorted(self.speaker_table, key=self.speaker_table.get)

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_table)

    def split(self, name: str) -> List[UtteranceRecord]:
        return [r for r in self.records if r.split == name]

    def by_speaker(self, split: Optional[str] = TRAIN) -> Dict[str, List[UtteranceRecord]]:
        out = {s: [] for s in self.speakers}
        for r in self.records:
            if split is None or r.split == split:
                out[r.speaker].append(r)
        return out

    def record(self, utt_id: str) -> UtteranceRecord:
        for r in self.records:
            if r.utt_id == utt_id:
                return r
        raise KeyError(utt_id)

    def header(self) -> dict:
        return {"version": MANIFEST_VERSION, "speaker_table": self.speaker_table,
                "provenance": self.provenance, "skipped": self.skipped,
                "f0_stats": self.f0_stats, "mcep_stats": self.mcep_stats, "features": self.features}

    def validate(self):
        ids = [r.utt_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate utt_id in manifest")
        if sorted(self.speaker_table.values()) != list(range(len(self.speaker_table))):
            raise ManifestError("speaker indices are not contiguous from 0")
        for r in self.records:
            if self.speaker_table.get(r.speaker) != r.speaker_index:
                raise ManifestError(f"{r.utt_id}: speaker index disagrees with speaker table")


def save_manifest(m: Manifest, path):
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": m.header()}, sort_keys=True) + "\n")
        for r in m.records:
            fh.write(json.dumps(dataclasses.asdict(r), sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_manifest(path) -> Manifest:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest file")
    header = json.loads(lines[0]).get("header")
    if header is None:
        raise ManifestError(f"{path}: first line is not a header object")
    m = Manifest(records=[UtteranceRecord(**json.loads(ln)) for ln in lines[1:]],
                 speaker_table=header["speaker_table"], provenance=header.get("provenance", {}),
                 skipped=header.get("skipped", []), f0_stats=header.get("f0_stats", {}),
                 mcep_stats=header.get("mcep_stats"), features=header.get("features"))
    m.validate()
    return m


def _holdout_count(n: int, fraction: float) -> int:
    if fraction <= 0 or n < 2:
        return 0
    return min(n - 1, max(1, int(math.ceil(fraction * n))))


def build_manifest(audio_root, holdout_fraction: float = 0.1, sample_rate: int = af.SAMPLE_RATE) -> Manifest:
    """Scan ``audio_root/<speaker>/<utterance>.wav`` in lexicographic order.

    The last ceil(holdout_fraction * n) files of each speaker (at least one,
    when the speaker has two or more) form the ``eval`` split. Unreadable
    files and files at another sample rate go to ``skipped`` with a reason.
    """
    root = Path(audio_root)
    if not root.is_dir():
        raise ManifestError(f"audio root {root} is not a directory")
    per_speaker, skipped = {}, []
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for wav in sorted(spk_dir.glob("*.wav")):
            try:
                info = sf.info(str(wav))
            except Exception as exc:
                skipped.append({"path": str(wav), "reason": f"unreadable: {exc}"})
                continue
            if info.samplerate != sample_rate:
                skipped.append({"path": str(wav), "reason": f"unsupported sample rate {info.samplerate}"})
                continue
            if info.frames == 0:
                skipped.append({"path": str(wav), "reason": "empty audio"})
                continue
            per_speaker.setdefault(spk_dir.name, []).append(wav)
    if not per_speaker:
        raise ManifestError(f"no usable audio under {root}")
    table = {spk: i for i, spk in enumerate(sorted(per_speaker))}
    records = []
    for spk, wavs in sorted(per_speaker.items()):
        n_eval = _holdout_count(len(wavs), holdout_fraction)
        for k, wav in enumerate(wavs):
            records.append(UtteranceRecord(
                utt_id=f"{spk}/{wav.stem}", speaker=spk, speaker_index=table[spk],
                audio_path=str(wav), split=EVAL if k >= len(wavs) - n_eval else TRAIN))
    for s in skipped:
        logger.warning("skipped %s: %s", s["path"], s["reason"])
    prov = {"audio_root": str(root), "holdout_fraction": holdout_fraction,
            "sample_rate": sample_rate, "subsets": []}
    return Manifest(records=records, speaker_table=table, provenance=prov, skipped=skipped)


def subset_low_resource(m: Manifest, n_speakers: int, m_samples: Union[int, str], seed: int) -> Manifest:
    """Seeded draw of ``n_speakers`` speakers, then ``m_samples`` training
    utterances each (``"full"`` keeps all). Only training-split records are
    kept; speakers are re-indexed contiguously in label order."""
    by_spk = m.by_speaker(TRAIN)
    labels = sorted(by_spk)
    if n_speakers < 1 or n_speakers > len(labels):
        raise ManifestError(f"requested {n_speakers} speakers, manifest has {len(labels)}")
    full = m_samples == "full"
    if not full and (not isinstance(m_samples, (int, np.integer)) or m_samples < 1):
        raise ManifestError(f"m_samples must be a positive int or 'full', got {m_samples!r}")
    rng = np.random.default_rng(seed)
    chosen = sorted(labels[i] for i in rng.choice(len(labels), n_speakers, replace=False))
    table = {spk: i for i, spk in enumerate(chosen)}
    records = []
    for spk in chosen:
        recs = by_spk[spk]
        if not full:
            if len(recs) < m_samples:
                raise ManifestError(
                    f"speaker {spk!r} has {len(recs)} training utterances, {m_samples} requested")
            keep = sorted(rng.choice(len(recs), int(m_samples), replace=False))
            recs = [recs[i] for i in keep]
        for r in recs:
            records.append(dataclasses.replace(r, speaker_index=table[spk]))
    prov = copy.deepcopy(m.provenance)
    prov.setdefault("subsets", []).append(
        {"n_speakers": n_speakers, "m_samples": m_samples, "seed": seed})
    out = Manifest(records=records, speaker_table=table, provenance=prov,
                   features=copy.deepcopy(m.features))
    if all(r.feature_cache_path for r in records):
        compute_speaker_stats(out)
    return out


def derive_from_provenance(provenance: dict, audio_root=None) -> Manifest:
    """Rebuild a manifest from its provenance (and optionally a relocated root)."""
    m = build_manifest(audio_root or provenance["audio_root"], provenance["holdout_fraction"],
                       provenance.get("sample_rate", af.SAMPLE_RATE))
    for sub in provenance.get("subsets", []):
        m = subset_low_resource(m, sub["n_speakers"], sub["m_samples"], sub["seed"])
    return m


def _file_hash(path, settings: dict) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(settings, sort_keys=True).encode())
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _extract_one(audio_path, utt_id, cache_path, cfg: af.FeatureConfig, source_hash):
    w = af.read_wav(audio_path)
    a = af.analyze(w, cfg.frame_period, cfg.fft_size, cfg.f0_floor, cfg.f0_ceil, cfg.f0_method, utt_id)
    mc = af.envelope_to_mcep(a, cfg.mcep_order)
    af.save_feature_cache(cache_path, mc.coeffs, a.f0, a.aperiodicity, a.frame_period,
                          a.sample_rate, source_hash)
    return mc.n_frames


def _valid_cache(path, source_hash) -> Optional[int]:
    if not os.path.exists(path):
        return None
    try:
        c = af.load_feature_cache(path)
    except Exception:
        return None
    if c["source_hash"] != source_hash or c["version"] != af.CACHE_VERSION:
        return None
    return int(c["mcep"].shape[0])


def cache_features(m: Manifest, cache_dir, cfg: Optional[af.FeatureConfig] = None, workers: int = 1) -> Manifest:
    """Analyse every record and write its feature container under ``cache_dir``.

    Caches whose stored hash (audio bytes + feature settings) still matches
    are reused without re-analysis. Returns a new manifest with n_frames,
    cache paths and per-speaker statistics filled in.
    """
    cfg = cfg or af.FeatureConfig()
    cfg.validate()
    settings = dataclasses.asdict(cfg)
    cache_dir = Path(cache_dir)
    out = copy.deepcopy(m)
    out.features = settings
    todo = []
    for r in out.records:
        path = cache_dir / r.speaker / (Path(r.audio_path).stem + ".npz")
        path.parent.mkdir(parents=True, exist_ok=True)
        r.feature_cache_path = str(path)
        r.source_hash = _file_hash(r.audio_path, settings)
        n = _valid_cache(path, r.source_hash)
        if n is None:
            todo.append(r)
        else:
            r.n_frames = n
    if workers > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            futs = [ex.submit(_extract_one, r.audio_path, r.utt_id, r.feature_cache_path, cfg, r.source_hash)
                    for r in todo]
            for r, fut in zip(todo, futs):
                r.n_frames = fut.result()
    else:
        for r in todo:
            r.n_frames = _extract_one(r.audio_path, r.utt_id, r.feature_cache_path, cfg, r.source_hash)
    logger.info("features: %d analysed, %d reused", len(todo), len(out.records) - len(todo))
    out.provenance = dict(out.provenance, last_cache_run={"analysed": len(todo),
                                                          "reused": len(out.records) - len(todo)})
    compute_speaker_stats(out)
    return out


def load_record_features(r: UtteranceRecord) -> dict:
    if not r.feature_cache_path or not os.path.exists(r.feature_cache_path):
        raise ManifestError(f"{r.utt_id}: missing feature cache")
    return af.load_feature_cache(r.feature_cache_path)


def compute_speaker_stats(m: Manifest):
    """Per-speaker log-F0 statistics and global MCEP mean/std, training split only."""
    f0_stats, frames = {}, []
    for spk, recs in m.by_speaker(TRAIN).items():
        f0s = []
        for r in recs:
            c = load_record_features(r)
            f0s.append(c["f0"])
            frames.append(c["mcep"].astype(np.float64))
        f0_stats[spk] = af.logf0_stats(np.concatenate(f0s) if f0s else np.zeros(0)).to_dict()
    m.f0_stats = f0_stats
    if frames:
        allf = np.concatenate(frames)
        m.mcep_stats = {"mean": allf.mean(0).tolist(), "std": np.maximum(allf.std(0), 1e-8).tolist()}
    return m
