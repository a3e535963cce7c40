import json
from pathlib import Path

import pytest

from soilref.dataset import load_dataset, load_refined_maps, save_dataset, sha256_file
from soilref.raster_io import unit_to_u8, write_pgm
from soilref.synth import SceneSpec, generate_dataset


@pytest.fixture(scope="module")
def generated():
    spec = SceneSpec(seed=5, size=(32, 32))
    return spec, generate_dataset(spec, 12, root_seed=5)


def test_save_load_round_trip(tmp_path, generated):
    spec, gen = generated
    save_dataset(tmp_path, gen, spec, seed=5)
    ds = load_dataset(tmp_path)
    assert len(ds.samples) == 12
    for g, s in zip(gen, ds.samples):
        assert s.id == g.sample.id
        # images pass through the 8-bit file format, labels are exact
        assert (unit_to_u8(s.image.data) == unit_to_u8(g.sample.image.data)).all()
        assert (s.truth.data == g.sample.truth.data).all()
        assert len(s.pls.maps) == 9
        for a, b in zip(s.pls.maps, g.sample.pls.maps):
            assert (a.data == b.data).all()
        assert s.pls.provenance == g.sample.pls.provenance


def test_manifest_is_deterministic(tmp_path, generated):
    spec, gen = generated
    save_dataset(tmp_path / "a", gen, spec, seed=5)
    save_dataset(tmp_path / "b", gen, spec, seed=5)
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    b = (tmp_path / "b" / "manifest.json").read_bytes()
    assert a == b


def test_manifest_hashes_match_files(tmp_path, generated):
    spec, gen = generated
    manifest = save_dataset(tmp_path, gen, spec, seed=5)
    for rel, digest in manifest["files"].items():
        assert sha256_file(tmp_path / rel) == digest


def test_split_partitions_ids(tmp_path, generated):
    spec, gen = generated
    save_dataset(tmp_path, gen, spec, seed=5)
    split = json.loads((tmp_path / "split.json").read_text())
    all_ids = [g.sample.id for g in gen]
    seen = split["train"] + split["val"] + split["test"]
    assert sorted(seen) == sorted(all_ids)
    assert len(split["train"]) > len(split["val"]) >= len(split["test"])


def test_part_selection(tmp_path, generated):
    spec, gen = generated
    save_dataset(tmp_path, gen, spec, seed=5)
    ds = load_dataset(tmp_path)
    parts = {name: ds.part(name) for name in ("train", "val", "test")}
    assert sum(len(v) for v in parts.values()) == 12
    assert len(ds.part("all")) == 12
    with pytest.raises(KeyError):
        ds.part("bogus")


def test_load_rejects_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


def test_load_rejects_wrong_format(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError, match="not a dataset manifest"):
        load_dataset(tmp_path)


def test_load_refined_maps_lists_missing_ids(tmp_path, generated):
    _, gen = generated
    write_pgm(tmp_path / "s00000.pgm", gen[0].sample.truth)
    with pytest.raises(FileNotFoundError) as err:
        load_refined_maps(tmp_path, ["s00000", "s00003", "s00005"])
    assert "s00003" in str(err.value) and "s00005" in str(err.value)
    loaded = load_refined_maps(tmp_path, ["s00000"])
    assert (loaded["s00000"].data == gen[0].sample.truth.data).all()
