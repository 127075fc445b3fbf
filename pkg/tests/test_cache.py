import json

import numpy as np
import pytest

from sieve.cache import EvidenceCache, load, refresh_triggered, save
from sieve.errors import FormatError
from sieve.grounding import EvidenceSnapshot, Region, discover_evidence


def make_snapshot(anchor_id=5, bbox=(0, 0, 1, 1), n=4, d=3, version=0, fill=1.0):
    region = Region(
        blocks=set(),
        bbox_patches=bbox,
        bbox_pixels=(bbox[0], bbox[1], bbox[2] + 1, bbox[3] + 1),
    )
    return EvidenceSnapshot(
        anchor=(anchor_id, "circle"),
        region=region,
        embeddings=np.full((n, d), fill, dtype=np.float64),
        source_space="input-embedding",
        model_version=version,
    )


class TestEvidenceCache:
    def test_upsert_lookup(self):
        cache = EvidenceCache()
        cache.upsert("a", [make_snapshot()], model_version=1)
        entry = cache.lookup("a")
        assert entry.sample_id == "a"
        assert entry.model_version == 1
        assert entry.refresh_count == 0
        assert cache.lookup("missing") is None

    def test_upsert_overwrite_preserves_refresh_count(self, tiny_model, samples):
        cache = EvidenceCache(
            patch_size=tiny_model.config.patch_size, vocab=tiny_model.config.vocab
        )
        sample = samples[0]
        snaps = discover_evidence(tiny_model, sample.image, sample.question)
        cache.upsert(sample.sample_id, snaps, tiny_model.version)
        cache.refresh(sample, tiny_model)
        assert cache.lookup(sample.sample_id).refresh_count == 1
        cache.upsert(sample.sample_id, snaps, tiny_model.version)
        assert cache.lookup(sample.sample_id).refresh_count == 1

    def test_refresh_requires_existing_entry(self, tiny_model, samples):
        cache = EvidenceCache()
        with pytest.raises(KeyError):
            cache.refresh(samples[0], tiny_model)

    def test_refresh_stamps_current_model_version(self, tiny_model, samples):
        cache = EvidenceCache(
            patch_size=tiny_model.config.patch_size, vocab=tiny_model.config.vocab
        )
        sample = samples[0]
        cache.upsert(
            sample.sample_id,
            discover_evidence(tiny_model, sample.image, sample.question),
            model_version=0,
        )
        tiny_model.version = 7
        try:
            cache.refresh(sample, tiny_model)
            entry = cache.lookup(sample.sample_id)
            assert entry.model_version == 7
            assert entry.refresh_count == 1
        finally:
            tiny_model.version = 0

    def test_sample_ids_sorted(self):
        cache = EvidenceCache()
        for key in ("z", "a", "m"):
            cache.upsert(key, [], 0)
        assert cache.sample_ids() == ["a", "m", "z"]


class TestPersistence:
    def test_round_trip_values(self, tmp_path):
        cache = EvidenceCache(patch_size=2, vocab={"circle": 5})
        rng = np.random.default_rng(0)
        snaps = []
        for i in range(3):
            s = make_snapshot(bbox=(i, 0, i + 1, 2), n=(i + 2) * 3, d=4)
            s.embeddings = rng.normal(size=s.embeddings.shape)
            snaps.append(s)
        cache.upsert("sample_a", snaps, model_version=3)
        path = tmp_path / "cache.svec"
        save(cache, path)
        loaded = load(path, vocab={"circle": 5}, patch_size=2)
        entry = loaded.lookup("sample_a")
        assert entry.model_version == 3
        assert len(entry.snapshots) == 3
        for orig, back in zip(snaps, entry.snapshots):
            assert back.anchor == (5, "circle")
            assert back.region.bbox_patches == orig.region.bbox_patches
            np.testing.assert_array_equal(
                back.embeddings, orig.embeddings.astype(np.float32)
            )

    def test_save_load_save_byte_identical(self, tmp_path):
        cache = EvidenceCache(vocab={"circle": 5})
        cache.upsert("k1", [make_snapshot(fill=0.25)], 1)
        cache.upsert("k2", [make_snapshot(bbox=(1, 1, 2, 2), fill=-3.5)], 2)
        p1, p2 = tmp_path / "a.svec", tmp_path / "b.svec"
        save(cache, p1)
        save(load(p1, vocab={"circle": 5}), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_refresh_count_persisted(self, tmp_path, tiny_model, samples):
        cache = EvidenceCache(
            patch_size=tiny_model.config.patch_size, vocab=tiny_model.config.vocab
        )
        sample = samples[0]
        cache.upsert(
            sample.sample_id,
            discover_evidence(tiny_model, sample.image, sample.question),
            tiny_model.version,
        )
        cache.refresh(sample, tiny_model)
        cache.refresh(sample, tiny_model)
        path = tmp_path / "c.svec"
        save(cache, path)
        loaded = load(path, vocab=tiny_model.config.vocab)
        assert loaded.lookup(sample.sample_id).refresh_count == 2

    def test_sidecar_written(self, tmp_path):
        cache = EvidenceCache(vocab={"circle": 5})
        cache.upsert("k", [make_snapshot()], 1)
        path = tmp_path / "c.svec"
        save(cache, path)
        sidecar = json.loads((tmp_path / "c.svec.json").read_text())
        assert sidecar["format_version"] == 1
        assert len(sidecar["entries"]) == 1
        assert sidecar["entries"][0]["sample_id"] == "k"
        snap = sidecar["entries"][0]["snapshots"][0]
        assert snap["anchor_token"] == "circle"
        assert snap["bbox_patches"] == [0, 0, 1, 1]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.svec"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError) as exc:
            load(path)
        assert exc.value.offset == 0

    def test_truncation_reports_offset(self, tmp_path):
        cache = EvidenceCache(vocab={"circle": 5})
        cache.upsert("k", [make_snapshot(n=8, d=4)], 1)
        path = tmp_path / "c.svec"
        save(cache, path)
        blob = path.read_bytes()
        cut = len(blob) - 10
        (tmp_path / "t.svec").write_bytes(blob[:cut])
        with pytest.raises(FormatError) as exc:
            load(tmp_path / "t.svec")
        assert exc.value.offset <= cut

    def test_trailing_bytes_rejected(self, tmp_path):
        cache = EvidenceCache(vocab={"circle": 5})
        cache.upsert("k", [make_snapshot()], 1)
        path = tmp_path / "c.svec"
        save(cache, path)
        (tmp_path / "x.svec").write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load(tmp_path / "x.svec")

    def test_unsupported_version(self, tmp_path):
        cache = EvidenceCache()
        path = tmp_path / "c.svec"
        save(cache, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        (tmp_path / "v.svec").write_bytes(bytes(blob))
        with pytest.raises(FormatError) as exc:
            load(tmp_path / "v.svec")
        assert exc.value.offset == 4


class TestRefreshTriggered:
    class _T:
        def __init__(self, ins):
            self.insertion_count = ins

    class _B:
        def __init__(self, r_res):
            self.r_res = r_res

    def test_truth_table(self):
        T, B = self._T, self._B
        # (insertion_count, r_res) -> trigger only when inserted and wrong
        assert refresh_triggered([T(1)], [B(0)]) is True
        assert refresh_triggered([T(1)], [B(1)]) is False
        assert refresh_triggered([T(0)], [B(0)]) is False
        assert refresh_triggered([T(0)], [B(1)]) is False

    def test_any_over_group(self):
        T, B = self._T, self._B
        trajs = [T(0), T(1), T(0)]
        assert refresh_triggered(trajs, [B(1), B(0), B(1)]) is True
        assert refresh_triggered(trajs, [B(0), B(1), B(0)]) is False
