"""On-disk dataset layout.

A dataset directory holds:
    manifest.json          canonical JSON: spec, sample index, file hashes
    split.json             train/val/test sample ids
    samples/<id>/image.ppm
    samples/<id>/truth.pgm
    samples/<id>/pl0.pgm ... pl8.pgm    (pl0 is the manual annotation)

Writers are canonical, so the same seed always produces byte-identical trees
(and therefore identical manifests and hashes).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .core import LabelMap, PseudoLabelStack, Sample
from .evaluation import SplitAssignment, presence_key, stratified_split
from .raster_io import read_pgm, read_ppm, write_pgm, write_ppm
from .synth import GeneratedSample, SceneSpec

MANIFEST_FORMAT = "soilref-dataset"
MANIFEST_VERSION = 1
N_PLS = 9


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class LoadedDataset:
    samples: tuple  # Sample, manifest order
    split: dict  # part -> tuple of sample ids
    spec: SceneSpec
    manifest: dict

    def part(self, name: str) -> list[Sample]:
        if name == "all":
            return list(self.samples)
        if name not in self.split:
            raise KeyError(f"unknown split part {name!r}")
        wanted = set(self.split[name])
        return [s for s in self.samples if s.id in wanted]

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(f"no sample {sample_id!r}")


def save_dataset(
    out_dir: Path,
    generated: Sequence[GeneratedSample],
    spec: SceneSpec,
    seed: int,
) -> dict:
    """Write samples, split, and manifest; returns the manifest dict."""
    out_dir = Path(out_dir)
    samples_dir = out_dir / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)

    index = []
    for g in generated:
        s = g.sample
        sd = samples_dir / s.id
        sd.mkdir(exist_ok=True)
        write_ppm(sd / "image.ppm", s.image)
        write_pgm(sd / "truth.pgm", s.truth)
        pl_names = []
        for q, m in enumerate(s.pls.maps):
            name = f"pl{q}.pgm"
            write_pgm(sd / name, m)
            pl_names.append(name)
        index.append(
            {
                "id": s.id,
                "image": f"samples/{s.id}/image.ppm",
                "truth": f"samples/{s.id}/truth.pgm",
                "pls": [f"samples/{s.id}/{n}" for n in pl_names],
                "provenance": list(s.pls.provenance),
            }
        )

    keys = [presence_key(g.sample.truth) for g in generated]
    split = stratified_split(keys, seed)
    ids = [g.sample.id for g in generated]
    split_ids = {
        "train": [ids[i] for i in split.train],
        "val": [ids[i] for i in split.val],
        "test": [ids[i] for i in split.test],
    }
    (out_dir / "split.json").write_text(canonical_json(split_ids))

    hashes = {}
    for entry in index:
        for rel in [entry["image"], entry["truth"], *entry["pls"]]:
            hashes[rel] = sha256_file(out_dir / rel)
    hashes["split.json"] = sha256_file(out_dir / "split.json")

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "n": len(generated),
        "seed": seed,
        "scene_spec": spec.to_dict(),
        "samples": index,
        "files": hashes,
    }
    (out_dir / "manifest.json").write_text(canonical_json(manifest))
    return manifest


def load_dataset(data_dir: Path) -> LoadedDataset:
    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{mpath} is not a dataset manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')}")

    spec = SceneSpec.from_dict(manifest["scene_spec"])
    samples = []
    for entry in manifest["samples"]:
        image = read_ppm(data_dir / entry["image"])
        truth = read_pgm(data_dir / entry["truth"])
        if len(entry["pls"]) != N_PLS:
            raise ValueError(f"sample {entry['id']}: expected {N_PLS} candidate maps")
        maps = tuple(read_pgm(data_dir / rel) for rel in entry["pls"])
        pls = PseudoLabelStack(maps, tuple(entry["provenance"]))
        samples.append(Sample(id=entry["id"], image=image, pls=pls, truth=truth))

    split_raw = json.loads((data_dir / "split.json").read_text())
    split = {k: tuple(v) for k, v in split_raw.items()}
    known = {s.id for s in samples}
    for part, part_ids in split.items():
        missing = [i for i in part_ids if i not in known]
        if missing:
            raise ValueError(f"split part {part} references unknown samples {missing}")
    return LoadedDataset(
        samples=tuple(samples), split=split, spec=spec, manifest=manifest
    )


def load_refined_maps(refined_dir: Path, sample_ids: Sequence[str]) -> dict[str, LabelMap]:
    """Read <id>.pgm refined annotations; errors list every missing id."""
    refined_dir = Path(refined_dir)
    missing = [i for i in sample_ids if not (refined_dir / f"{i}.pgm").is_file()]
    if missing:
        raise FileNotFoundError(
            f"missing refined annotations in {refined_dir}: {', '.join(missing)}"
        )
    return {i: read_pgm(refined_dir / f"{i}.pgm") for i in sample_ids}
