import json

import numpy as np
import pytest

from dpa_reid.data import (ImageLoader, PkSampler, SynthSpec, decode_ppm, encode_ppm, identity_latent,
                           image_nuisance, load_manifest, parse_manifest, pk_sampler_next, synth_generate)
from dpa_reid.exceptions import (InsufficientIdentities, MissingImage, NonDenseIdentityIds, ParseError,
                                 ShapeMismatch)


def manifest_doc(ids, size=(4, 4), splits=None):
    splits = splits or ["train"] * len(ids)
    return {"version": 1, "image_size": list(size), "num_identities": max(ids) + 1,
            "entries": [{"path": f"img{i}.ppm", "id": k, "cam": 0, "split": s}
                        for i, (k, s) in enumerate(zip(ids, splits))]}


def test_ppm_round_trip_is_lossless():
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    buf = encode_ppm(img)
    assert buf.startswith(b"P6\n7 5\n255\n")
    np.testing.assert_array_equal(np.round(decode_ppm(buf) * 255).astype(np.uint8), img)


def test_ppm_normalization():
    buf = b"P6\n1 1\n255\n" + bytes([255, 0, 0])
    np.testing.assert_array_equal(decode_ppm(buf).reshape(3), [1.0, 0.0, 0.0])


def test_ppm_header_comments_and_16_bit():
    buf = b"P6 # comment\n1 1\n65535\n" + np.array([65535, 0, 32768], dtype=">u2").tobytes()
    np.testing.assert_allclose(decode_ppm(buf).reshape(3), [1.0, 0.0, 32768 / 65535])


@pytest.mark.parametrize("buf", [b"P5\n1 1\n255\n\x00", b"P6\n2 2\n255\n\x00\x00", b"P6\n1", b"P6\nx 1\n255\n"])
def test_ppm_malformed(buf):
    with pytest.raises(ParseError):
        decode_ppm(buf)


def test_encode_rejects_wrong_layout():
    with pytest.raises(ShapeMismatch):
        encode_ppm(np.zeros((4, 4), dtype=np.uint8))


def test_non_dense_ids():
    with pytest.raises(NonDenseIdentityIds):
        parse_manifest(json.dumps(manifest_doc([0, 1, 3])))


def test_manifest_parse_errors_carry_location():
    with pytest.raises(ParseError) as info:
        parse_manifest('{"version": 1,\n "image_size": [4, 4],\n oops}')
    assert info.value.line == 3
    doc = manifest_doc([0, 1])
    del doc["entries"][1]["cam"]
    with pytest.raises(ParseError) as info:
        parse_manifest(json.dumps(doc))
    assert info.value.field == "cam"
    doc = manifest_doc([0, 1])
    doc["entries"][0]["split"] = "val"
    with pytest.raises(ParseError):
        parse_manifest(json.dumps(doc))


def test_query_identity_must_be_in_gallery():
    with pytest.raises(ParseError):
        parse_manifest(json.dumps(manifest_doc([0, 1], splits=["train", "query"])))


def test_two_entry_manifest_loads(tmp_path):
    doc = manifest_doc([0, 1], size=(3, 5))
    for e in doc["entries"]:
        (tmp_path / e["path"]).write_bytes(encode_ppm(np.full((3, 5, 3), 128, dtype=np.uint8)))
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    manifest, loader = load_manifest(tmp_path / "manifest.json")
    batch = loader.load([0, 1])
    assert batch.shape == (2, 3, 3, 5)
    assert batch.min() >= 0 and batch.max() <= 1


def test_missing_image(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps(manifest_doc([0, 1])))
    with pytest.raises(MissingImage):
        load_manifest(tmp_path / "manifest.json")


def test_loader_rejects_wrong_size(tmp_path):
    doc = manifest_doc([0], size=(4, 4))
    (tmp_path / "img0.ppm").write_bytes(encode_ppm(np.zeros((2, 2, 3), dtype=np.uint8)))
    loader = ImageLoader(parse_manifest(json.dumps(doc), root=tmp_path))
    with pytest.raises(ShapeMismatch):
        loader.load([0])


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_is_deterministic(tmp_path):
    spec = SynthSpec(num_identities=6, images_per_identity=4, held_out_identities=2, seed=7)
    synth_generate(spec, tmp_path / "a")
    synth_generate(spec, tmp_path / "b")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    synth_generate(SynthSpec(num_identities=6, images_per_identity=4, held_out_identities=2, seed=8), tmp_path / "c")
    assert _tree(tmp_path / "a") != _tree(tmp_path / "c")


def test_synth_counts_and_splits(tmp_path):
    spec = SynthSpec(num_identities=20, images_per_identity=10, held_out_identities=5, image_size=16)
    m = synth_generate(spec, tmp_path)
    assert len(m.entries) == 200
    assert {e.id for e in m.entries if e.split == "train"} == set(range(15))
    assert all(e.cam == 1 for e in m.entries if e.split == "query")
    assert all(e.cam == 0 for e in m.entries if e.split == "gallery")
    reparsed, loader = load_manifest(tmp_path / "manifest.json")
    assert reparsed.entries == m.entries
    assert loader.load([0]).shape == (1, 3, 16, 16)


def test_synth_latent_depends_only_on_identity_and_seed():
    spec = SynthSpec(seed=3)
    assert identity_latent(spec, 4) == identity_latent(SynthSpec(seed=3, images_per_identity=2), 4)
    assert identity_latent(spec, 4) != identity_latent(spec, 5)
    assert 0 < sum(identity_latent(spec, 4).glyph) < 9


def test_synth_images_of_one_identity_differ():
    spec = SynthSpec(num_identities=2, images_per_identity=3, held_out_identities=0)
    assert image_nuisance(spec, 0, 0) != image_nuisance(spec, 0, 1)
    assert image_nuisance(spec, 0, 0) == image_nuisance(spec, 0, 0)


def test_pk_batches_have_p_identities_times_k():
    labels = np.repeat(np.arange(12), 6)
    sampler = PkSampler(labels, P=8, K=4, seed=0)
    for _ in range(10):
        b = pk_sampler_next(sampler)
        assert len(b.indices) == 32
        assert len(set(b.labels.tolist())) == 8
        assert all(np.sum(b.labels == k) == 4 for k in set(b.labels.tolist()))
        np.testing.assert_array_equal(labels[b.indices], b.labels)
        for k in set(b.labels.tolist()):
            assert len(set(b.indices[b.labels == k].tolist())) == 4  # no replacement when possible


def test_pk_small_identity_uses_replacement():
    labels = np.array([0, 0] + [1] * 5 + [2] * 5)
    sampler = PkSampler(labels, P=3, K=4, seed=1)
    b = sampler.next()
    slots = b.indices[b.labels == 0]
    assert len(slots) == 4 and set(slots.tolist()) == {0, 1}


def test_pk_same_seed_same_sequence():
    labels = np.repeat(np.arange(7), 3)
    a, b = PkSampler(labels, 2, 2, seed=5), PkSampler(labels, 2, 2, seed=5)
    for _ in range(12):
        x, y = a.next(), b.next()
        np.testing.assert_array_equal(x.indices, y.indices)


def test_pk_every_identity_each_epoch():
    labels = np.repeat(np.arange(10), 3)
    sampler = PkSampler(labels, P=4, K=2, seed=2)
    for _ in range(5):
        seen = set()
        for _ in range(sampler.batches_per_epoch()):
            seen |= set(sampler.next().labels.tolist())
        assert seen == set(range(10))


def test_pk_batches_give_every_anchor_positive_and_negative():
    sampler = PkSampler(np.repeat(np.arange(5), 2), P=2, K=2, seed=3)
    for _ in range(20):
        lab = sampler.next().labels
        for a in range(len(lab)):
            assert np.sum(lab == lab[a]) >= 2 and np.any(lab != lab[a])


def test_pk_insufficient_identities():
    with pytest.raises(InsufficientIdentities):
        PkSampler([0, 0, 1, 1], P=3, K=2)
