import dataclasses

import numpy as np
import pytest
import soundfile as sf

from wadain_vc import acoustic_features as af
from wadain_vc import data_manifest as dm
from wadain_vc.data_manifest import (EVAL, TRAIN, Manifest, ManifestError, UtteranceRecord, build_manifest,
                                     cache_features, derive_from_provenance, load_manifest, save_manifest,
                                     subset_low_resource)

from conftest import write_voice


def silent_tree(root, n_speakers, n_files, seconds=0.05, sr=af.SAMPLE_RATE):
    for s in range(n_speakers):
        d = root / f"p{s:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for u in range(n_files):
            sf.write(str(d / f"u{u:03d}.wav"), np.full(int(seconds * sr), 0.01), sr, subtype="PCM_16")
    return root


def memory_manifest(n_speakers, n_utts):
    table = {f"s{k:02d}": k for k in range(n_speakers)}
    recs = [UtteranceRecord(f"{s}/{u:03d}", s, k, f"/x/{s}/{u:03d}.wav") for s, k in table.items()
            for u in range(n_utts)]
    return Manifest(records=recs, speaker_table=table, provenance={"subsets": []})


def test_build_two_by_three(tmp_path):
    m = build_manifest(silent_tree(tmp_path / "a", 2, 3))
    assert len(m) == 6
    assert {r.speaker_index for r in m.records} == {0, 1}
    assert [r.utt_id for r in m.records] == sorted(r.utt_id for r in m.records)
    # holdout: ceil(0.1 * 3) = 1 per speaker, the lexicographically last file
    assert [r.utt_id for r in m.split(EVAL)] == ["p000/u002", "p001/u002"]


def test_build_deterministic(tmp_path):
    root = silent_tree(tmp_path / "a", 2, 3)
    assert build_manifest(root) == build_manifest(root)


def test_build_skip_list(tmp_path):
    root = silent_tree(tmp_path / "a", 2, 3)
    sf.write(str(root / "p000" / "z_rate.wav"), np.zeros(1600), 16000, subtype="PCM_16")
    (root / "p001" / "z_junk.wav").write_bytes(b"not a wav file")
    m = build_manifest(root)
    assert len(m) == 6
    reasons = {s["path"].rsplit("/", 1)[-1]: s["reason"] for s in m.skipped}
    assert "sample rate 16000" in reasons["z_rate.wav"]
    assert reasons["z_junk.wav"].startswith("unreadable")


def test_build_empty_root(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ManifestError):
        build_manifest(tmp_path / "empty")


def test_subset_full_and_counts():
    m = memory_manifest(10, 20)
    full = subset_low_resource(m, 3, "full", seed=0)
    assert len(full) == 60 and full.n_speakers == 3
    sub = subset_low_resource(m, 2, 5, seed=0)
    assert len(sub) == 10
    assert sorted(sub.speaker_table.values()) == [0, 1]
    ids = {r.utt_id for r in m.records}
    assert all(r.utt_id in ids for r in sub.records)
    sub.validate()
    assert sub.provenance["subsets"] == [{"n_speakers": 2, "m_samples": 5, "seed": 0}]


def _key(m):
    return tuple(r.utt_id for r in m.records)


def test_subset_seeding_and_collisions():
    m = memory_manifest(10, 20)
    assert _key(subset_low_resource(m, 2, 5, 7)) == _key(subset_low_resource(m, 2, 5, 7))
    # P(two seeds agree) = 1/C(10,2) * C(20,5)^-2 ~ 1e-10, so no collisions expected in 100 seeds
    ref = _key(subset_low_resource(m, 2, 5, 0))
    same = sum(_key(subset_low_resource(m, 2, 5, s)) == ref for s in range(1, 101))
    assert same == 0
    # speaker draws alone: 45 pairs, so some repeats of the speaker set are expected
    pairs = [tuple(subset_low_resource(m, 2, "full", s).speakers) for s in range(100)]
    assert 20 <= len(set(pairs)) <= 45


def test_subset_errors_name_speaker():
    m = memory_manifest(3, 4)
    m.records = [r for r in m.records if not (r.speaker == "s01" and r.utt_id.endswith(("002", "003")))]
    with pytest.raises(ManifestError, match="s01"):
        subset_low_resource(m, 3, 3, seed=0)
    with pytest.raises(ManifestError):
        subset_low_resource(m, 4, 1, seed=0)
    with pytest.raises(ManifestError):
        subset_low_resource(m, 2, 0, seed=0)


def test_subset_keeps_train_split_only():
    m = memory_manifest(2, 6)
    m.records[0] = dataclasses.replace(m.records[0], split=EVAL)
    sub = subset_low_resource(m, 2, "full", 0)
    assert all(r.split == TRAIN for r in sub.records) and len(sub) == 11


def test_manifest_file_roundtrip_and_provenance(tmp_path):
    root = silent_tree(tmp_path / "a", 3, 7)
    m = build_manifest(root)
    sub = subset_low_resource(m, 2, 5, seed=4)
    p = tmp_path / "sub.jsonl"
    save_manifest(sub, p)
    back = load_manifest(p)
    assert back == sub
    assert derive_from_provenance(back.provenance) == sub
    first = p.read_text().splitlines()[0]
    assert '"header"' in first


def test_load_rejects_bad_files(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    with pytest.raises(ManifestError):
        load_manifest(p)
    p.write_text('{"utt_id": "x"}\n')
    with pytest.raises(ManifestError):
        load_manifest(p)


def test_validate_contiguity():
    m = memory_manifest(2, 2)
    m.speaker_table = {"s00": 0, "s01": 2}
    with pytest.raises(ManifestError):
        m.validate()


def test_cache_features_idempotent(tmp_path, monkeypatch):
    root = tmp_path / "audio"
    for k, f0 in enumerate((120.0, 200.0)):
        for u in range(3):
            write_voice(str(root / f"s{k}" / f"u{u}.wav"), f0, 900.0, seconds=0.3, seed=u)
    m = build_manifest(root, holdout_fraction=0.34)
    calls = []
    real = af.analyze
    monkeypatch.setattr(dm.af, "analyze", lambda *a, **k: calls.append(1) or real(*a, **k))
    c1 = cache_features(m, tmp_path / "cache")
    assert len(calls) == 6 and c1.provenance["last_cache_run"] == {"analysed": 6, "reused": 0}
    c2 = cache_features(m, tmp_path / "cache")
    assert len(calls) == 6 and c2.provenance["last_cache_run"] == {"analysed": 0, "reused": 6}
    for r in c2.records:
        c = af.load_feature_cache(r.feature_cache_path)
        assert r.n_frames == c["mcep"].shape[0] == c["f0"].shape[0] == c["ap"].shape[0]
        assert c["mcep"].shape[1] == 37
    # f0 stats come from the training split only
    for spk, recs in c2.by_speaker(TRAIN).items():
        f0 = np.concatenate([af.load_feature_cache(r.feature_cache_path)["f0"] for r in recs])
        assert c2.f0_stats[spk] == af.logf0_stats(f0).to_dict()
    assert np.exp(c2.f0_stats["s0"]["mean"]) == pytest.approx(120.0, rel=0.05)
    # touching the audio invalidates its cache
    write_voice(str(root / "s0" / "u0.wav"), 130.0, 900.0, seconds=0.3, seed=9)
    c3 = cache_features(m, tmp_path / "cache")
    assert c3.provenance["last_cache_run"] == {"analysed": 1, "reused": 5}


def test_missing_cache_names_utterance():
    r = UtteranceRecord("spk/x1", "spk", 0, "/none.wav", feature_cache_path="/none.npz")
    with pytest.raises(ManifestError, match="spk/x1"):
        dm.load_record_features(r)
