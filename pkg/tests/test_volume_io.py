import json

import numpy as np
import pytest

from highres3d.volume_io import (DataError, DatasetManifest, DimensionMismatchError, SyntheticSpec,
                                 TruncatedPayloadError, Volume, VolumeFormatError, generate_synthetic,
                                 read_volume, write_volume)


def test_float_and_label_round_trip(tmp_path):
    img = np.random.default_rng(0).normal(size=(1, 3, 4, 5)).astype(np.float32)
    write_volume(tmp_path / "img.vol", Volume(img, (0.5, 1.0, 2.0)))
    back = read_volume(tmp_path / "img.vol")
    assert np.array_equal(back.data, img) and back.spacing == (0.5, 1.0, 2.0)
    lab = np.arange(60, dtype=np.uint16).reshape(3, 4, 5)
    write_volume(tmp_path / "lab.vol", lab)
    got = read_volume(tmp_path / "lab.vol").data
    assert got.dtype == np.uint16 and np.array_equal(got, lab)


def test_header_layout(tmp_path):
    write_volume(tmp_path / "v.vol", np.zeros((2, 2, 2), np.float32))
    blob = (tmp_path / "v.vol").read_bytes()
    assert blob.startswith(b"HR3DVOL\n")
    header = blob[:blob.index(b"END\n")].decode()
    assert "dims: 2 2 2" in header and "payload_bytes: 32" in header
    assert len(blob) - blob.index(b"END\n") - 4 == 32


def test_truncated_payload(tmp_path):
    p = tmp_path / "v.vol"
    write_volume(p, np.zeros((4, 4, 4), np.float32))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(TruncatedPayloadError):
        read_volume(p)


def test_dims_disagreeing_with_payload(tmp_path):
    p = tmp_path / "v.vol"
    write_volume(p, np.zeros((4, 4, 4), np.float32))
    p.write_bytes(p.read_bytes().replace(b"dims: 4 4 4", b"dims: 4 4 5"))
    with pytest.raises(DimensionMismatchError):
        read_volume(p)


@pytest.mark.parametrize("edit", [
    lambda b: b"NOTAVOL\n" + b[8:],
    lambda b: b.replace(b"END\n", b"END?"),
    lambda b: b.replace(b"dtype: f32", b"dtype: f64"),
    lambda b: b.replace(b"version: 1", b"version: 9"),
    lambda b: b + b"\x00",
])
def test_malformed_headers(tmp_path, edit):
    p = tmp_path / "v.vol"
    write_volume(p, np.zeros((2, 2, 2), np.float32))
    p.write_bytes(edit(p.read_bytes()))
    with pytest.raises(VolumeFormatError):
        read_volume(p)


def test_labels_out_of_u16_range(tmp_path):
    with pytest.raises(VolumeFormatError):
        write_volume(tmp_path / "l.vol", np.array([[[70000]]], dtype=np.int64))


def test_generator_is_deterministic(tmp_path):
    spec = SyntheticSpec(size=16, counts={"train": 2, "validation": 1, "test": 1}, seed=11)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 9
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_generated_data_is_imbalanced_with_every_class(tmp_path):
    m = generate_synthetic(SyntheticSpec(size=24, num_classes=4, seed=2), tmp_path)
    for split in ("train", "validation", "test"):
        for img, lab in m.load(split):
            counts = np.bincount(lab.ravel(), minlength=4)
            assert (counts > 0).all()
            assert counts[0] / lab.size > 0.8
            assert img.shape == (1,) + lab.shape


def test_manifest_round_trip_and_validation(tmp_path, small_dataset):
    m = DatasetManifest.read(small_dataset.root / "manifest.json")
    assert m.num_classes == 3
    assert [len(m.split(s)) for s in ("train", "validation", "test")] == [2, 1, 1]
    doc = json.loads((small_dataset.root / "manifest.json").read_text())
    doc["entries"][0]["image"] = "missing.vol"
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(DataError):
        DatasetManifest.read(tmp_path / "manifest.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(DataError):
        DatasetManifest.read(tmp_path / "broken.json")


def test_manifest_rejects_labels_beyond_class_count(tmp_path):
    generate_synthetic(SyntheticSpec(size=16, num_classes=3, counts={"train": 1}), tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["num_classes"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(DataError):
        DatasetManifest.read(tmp_path / "manifest.json").load("train")


def test_generator_argument_errors(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(num_classes=1), tmp_path)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(size=8), tmp_path)
