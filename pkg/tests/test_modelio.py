import json

import numpy as np
import pytest

from cvlm import fixtures, modelio
from cvlm.tensor import Tensor


def test_archive_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": Tensor(rng.standard_normal((5, 7)).astype(np.float32)),
               "b.b": Tensor(rng.standard_normal(3).astype(np.float32))}
    path = tmp_path / "t.cvlm"
    modelio.save_archive(tensors, path)
    loaded = modelio.load_archive(path)
    assert set(loaded) == {"a.w", "b.b"}
    for name in tensors:
        assert loaded[name].data.tobytes() == tensors[name].data.tobytes()


def test_empty_archive_valid(tmp_path):
    path = tmp_path / "empty.cvlm"
    modelio.save_archive({}, path)
    assert modelio.load_archive(path) == {}


def test_archive_layout_aligned_and_ascending(tmp_path):
    tensors = {"x": Tensor(np.ones((3, 5), dtype=np.float32)),
               "y": Tensor(np.ones((2, 2), dtype=np.float32))}
    path = tmp_path / "t.cvlm"
    modelio.save_archive(tensors, path)
    header = modelio.read_archive_header(path)
    ents = sorted(header.values(), key=lambda e: e["offset"])
    assert ents[0]["offset"] == 0
    assert ents[1]["offset"] >= ents[0]["offset"] + ents[0]["length"]
    for e in ents:
        assert e["offset"] % 64 == 0


def test_archive_rejects_f64(tmp_path):
    with pytest.raises(modelio.ArchiveError, match="f32"):
        modelio.save_archive({"x": Tensor(np.ones(3, dtype=np.float64))},
                             tmp_path / "t.cvlm")


def test_load_missing_tensor_names_it(tmp_path, toy_manifest):
    weights = modelio.init_random(toy_manifest, seed=1)
    del weights["projector.w2"]
    path = tmp_path / "partial.cvlm"
    modelio.save_archive(weights, path)
    with pytest.raises(modelio.ArchiveError, match="projector.w2"):
        modelio.load_archive(path, toy_manifest)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "bad.cvlm"
    path.write_bytes(b"NOPE!" + b"\x00" * 64)
    with pytest.raises(modelio.ArchiveError, match="magic"):
        modelio.load_archive(path)


def test_load_shape_mismatch(tmp_path, toy_manifest):
    weights = modelio.init_random(toy_manifest, seed=1)
    weights["projector.w1"] = Tensor(np.zeros((2, 2), dtype=np.float32))
    path = tmp_path / "warped.cvlm"
    modelio.save_archive(weights, path)
    with pytest.raises(modelio.ArchiveError, match="projector.w1"):
        modelio.load_archive(path, toy_manifest)


def test_full_toy_round_trip(tmp_path, toy_manifest):
    weights = modelio.init_random(toy_manifest, seed=3)
    path = tmp_path / "full.cvlm"
    modelio.save_archive(weights, path)
    loaded = modelio.load_archive(path, toy_manifest)
    assert set(loaded) == set(modelio.expected_tensors(toy_manifest))


def test_init_random_deterministic(toy_manifest):
    a = modelio.init_random(toy_manifest, seed=7)
    b = modelio.init_random(toy_manifest, seed=7)
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()
    c = modelio.init_random(toy_manifest, seed=8)
    assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a)


def test_init_random_layernorm_gains_are_one(toy_manifest):
    weights = modelio.init_random(toy_manifest, seed=7)
    for name, t in weights.items():
        if name.endswith("ln.w") or name.endswith("ln1.w") or name.endswith("ln2.w") \
                or name.endswith("ln_pre.w"):
            assert np.all(t.data == 1.0), name


def test_init_random_statistics(toy_manifest):
    weights = modelio.init_random(toy_manifest, seed=11)
    big = np.concatenate([t.data.ravel() for n, t in weights.items()
                          if n.endswith("qkv.w") or n == "decoder.embed"])
    n = big.size
    assert n >= 10_000
    # truncated normal at 2 sigma has std ~0.88 * 0.02
    assert abs(big.mean()) < 3 * (0.02 / np.sqrt(n))
    assert np.abs(big).max() <= 0.04 + 1e-9


def test_manifest_cross_dims_rejected(tmp_path, toy_manifest):
    d = modelio.manifest_to_dict(toy_manifest)
    d["projector"]["output"] = 99
    path = tmp_path / "m.json"
    path.write_text(json.dumps(d), encoding="utf-8")
    with pytest.raises(modelio.ManifestError, match="projector output"):
        modelio.load_manifest(path)


def test_manifest_round_trip(tmp_path, toy_manifest):
    path = tmp_path / "m.json"
    modelio.save_manifest(toy_manifest, path)
    again = modelio.load_manifest(path)
    assert modelio.manifest_hash(again) != ""
    assert again.decoder == toy_manifest.decoder
    assert again.vision == toy_manifest.vision


def test_decode_image_round_trip():
    png = fixtures.make_test_image((10, 200, 30), size=9)
    arr = modelio.decode_image(png)
    assert arr.shape == (9, 9, 3)
    assert tuple(arr[0, 0]) == (10, 200, 30)


def test_decode_image_rejects_garbage():
    with pytest.raises(modelio.ImageDecodeError, match="undecodable"):
        modelio.decode_image(b"this is not an image")


def test_reference_manifest_validates():
    m = modelio.reference_manifest()
    m.validate()
    assert m.vision.patch_tokens == 576
    assert m.decoder.hidden % m.decoder.heads == 0


def test_convert_checkpoint_stub():
    ext = {"model.layers.0.weight": np.ones((2, 3), dtype=np.float32)}
    name_map = {"model.layers.0.weight": {"name": "decoder.block0.attn.out.w",
                                          "transpose": True}}
    out = modelio.convert_checkpoint(ext, name_map)
    assert out["decoder.block0.attn.out.w"].shape == (3, 2)
