import numpy as np
import pytest
import torch

from spawnnet.backbone import build_backbone
from spawnnet.cache import CacheManifest, FeatureStore, build_cache, read_cache, read_manifest
from spawnnet.errors import InputError, StaleCacheError

from conftest import tiny_backbone_spec


@pytest.fixture
def images():
    rng = np.random.default_rng(0)
    return [(f"img-{i}", rng.integers(0, 256, (16, 16, 4), dtype=np.uint8)) for i in range(5)]


def test_round_trip_equals_live_extraction(tmp_path, tiny_backbone, images):
    m = build_cache(tiny_backbone, images, tmp_path, batch_size=2)
    assert m.count == 5 and m.layers == (1, 2, 3) and m.spec_hash == tiny_backbone.spec_hash
    for image_id, img in images:
        live = tiny_backbone.extract_dense(img[..., :3])
        for l in (1, 2, 3):
            g = read_cache(tmp_path, image_id, l, spec_hash=tiny_backbone.spec_hash)
            np.testing.assert_allclose(g.data.numpy(), live[l].data[0].numpy(), rtol=1e-6, atol=0)
            assert g.source_image_id == image_id
        cls = read_cache(tmp_path, image_id, "cls")
        np.testing.assert_allclose(cls.numpy(), tiny_backbone.extract_cls(img)[0].numpy(), rtol=1e-6)


def test_blob_layout_and_manifest_text(tmp_path, tiny_backbone, images):
    build_cache(tiny_backbone, images[:1], tmp_path)
    assert (tmp_path / "img-0.L2.f32").stat().st_size == 2 * 2 * 24 * 4
    text = (tmp_path / "manifest.txt").read_text()
    m = CacheManifest.parse(text)
    assert m.render() == text and m.image_ids == ["img-0"]


def test_stale_hash_is_rejected(tmp_path, tiny_backbone, images):
    build_cache(tiny_backbone, images, tmp_path)
    other = build_backbone(tiny_backbone_spec(init_seed=11))
    with pytest.raises(StaleCacheError):
        read_cache(tmp_path, "img-0", 1, spec_hash=other.spec_hash)
    with pytest.raises(StaleCacheError):
        build_cache(other, images, tmp_path)
    with pytest.raises(StaleCacheError):
        FeatureStore.from_cache(tmp_path, ["img-0"], [1], spec_hash=other.spec_hash)


def test_missing_image_is_lookup_error(tmp_path, tiny_backbone, images):
    build_cache(tiny_backbone, images, tmp_path)
    with pytest.raises(KeyError):
        read_cache(tmp_path, "nope", 1)
    with pytest.raises(StaleCacheError):
        FeatureStore.from_cache(tmp_path, ["nope"], [1])


def test_incremental_build_keeps_entries(tmp_path, tiny_backbone, images):
    build_cache(tiny_backbone, images[:2], tmp_path)
    m = build_cache(tiny_backbone, images, tmp_path)
    assert m.image_ids == [i for i, _ in images]
    assert read_manifest(tmp_path).count == 5


def test_bad_ids_and_empty_input(tmp_path, tiny_backbone, images):
    with pytest.raises(InputError):
        build_cache(tiny_backbone, [("../x", images[0][1])], tmp_path / "a")
    with pytest.raises(InputError):
        build_cache(tiny_backbone, [], tmp_path / "b")


def test_feature_store_from_cache_matches_live(tmp_path, tiny_backbone, images):
    build_cache(tiny_backbone, images, tmp_path)
    ids = [i for i, _ in images]
    cached = FeatureStore.from_cache(tmp_path, ids, [1, 3], with_cls=True)
    live = FeatureStore([1, 3], with_cls=True)
    live.add_live(tiny_backbone, ids, np.stack([im for _, im in images]), batch_size=3)
    rows = live.rows(["img-3", "img-1"])
    a, b = cached.gather(cached.rows(["img-3", "img-1"])), live.gather(rows)
    for k in a:
        torch.testing.assert_close(a[k], b[k], rtol=1e-6, atol=0)
    assert a[1].shape == (2, 24, 2, 2)
    with pytest.raises(StaleCacheError):
        live.rows(["missing"])
