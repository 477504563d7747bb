import json

import numpy as np
import pytest

from maskadapt.backends import OracleSegmenter, StickFigureDetector, white_page_segmenter
from maskadapt.dataset import (
    DatasetError,
    build_dataset,
    eval_cases,
    file_image_source,
    load_entry,
    toy_image_source,
    training_samples,
)
from maskadapt.surrogate import build_surrogate_stack
from maskadapt.taxonomy import EDIT_TASKS, TagRecord, load_constants, load_taxonomy, read_manifest
from maskadapt.toydata import toy_metadata


def records(n=4):
    return [TagRecord.from_metadata(r) for r in toy_metadata(n, 0)]


def build(tmp_path, recs, **kw):
    return build_dataset(recs, tmp_path, load_taxonomy(), load_constants(), kw.pop("source", toy_image_source()),
                         kw.pop("segmenter", white_page_segmenter()), StickFigureDetector(), **kw)


def test_toy_build_roundtrip(tmp_path):
    entries, stats = build(tmp_path, records())
    assert stats.accepted == 4 and stats.seen == 4
    assert read_manifest(tmp_path / "manifest.jsonl") == entries
    e = entries[0]
    le = load_entry(e, tmp_path)
    assert le.image.shape == (32, 32, 3) and le.mask.any() and le.skeleton.num_detected == 18
    assert set(e.edits) == set(EDIT_TASKS)
    assert "training" in e.prompts and not set(e.prompts["training"]) & set(e.clusters.char_name)


def test_rejections_counted(tmp_path):
    recs = records(2)
    bad = dict(toy_metadata(1, 5)[0], id="x1", rating="explicit")
    recs.append(TagRecord.from_metadata(bad))
    _, stats = build(tmp_path, recs)
    assert stats.accepted == 2 and sum(stats.rejected.values()) == 1


def test_empty_mask_rejected(tmp_path):
    recs = records(1)
    seg = OracleSegmenter({recs[0].id: np.zeros((32, 32), bool)})
    _, stats = build(tmp_path, recs, segmenter=seg)
    assert stats.accepted == 0 and stats.rejected["empty mask"] == 1
    assert (tmp_path / "manifest.jsonl").read_text() == ""


def test_task_subset(tmp_path):
    entries, _ = build(tmp_path, records(2), tasks=("scene", "expression"))
    assert all(set(e.edits) == {"scene", "expression"} for e in entries)


def test_training_samples_and_cases(tmp_path):
    entries, _ = build(tmp_path, records(3))
    spec = build_surrogate_stack().vision.spec()
    samples = training_samples(entries, tmp_path, spec)
    assert len(samples) == 3 and samples[0].image.shape == (3, 32, 32)
    assert samples[0].mask.values[0] == 1
    cases = eval_cases(entries, tmp_path)
    assert len(cases) == 3 * len(EDIT_TASKS)
    assert all((c.pose is not None) == (c.task == "pose_cond") for c in cases)
    assert len(eval_cases(entries, tmp_path, ("scene",), max_per_task=2)) == 2
    with pytest.raises(DatasetError):
        eval_cases(entries, tmp_path, ("bogus",))
    with pytest.raises(DatasetError):
        training_samples(entries, tmp_path, build_surrogate_stack(image_size=64).vision.spec())


def test_missing_files_are_data_errors(tmp_path):
    entries, _ = build(tmp_path, records(1))
    (tmp_path / entries[0].mask_path).unlink()
    with pytest.raises(DatasetError):
        load_entry(entries[0], tmp_path)
    src = file_image_source(tmp_path)
    rec = TagRecord.from_metadata(dict(toy_metadata(1)[0], image_path="nope.png"))
    with pytest.raises(DatasetError):
        src(rec, None)
    with pytest.raises(DatasetError):
        src(records(1)[0], None)


def test_file_image_source(tmp_path):
    entries, _ = build(tmp_path / "a", records(1))
    meta = dict(toy_metadata(1)[0], image_path=entries[0].image_path)
    out, stats = build(tmp_path / "b", [TagRecord.from_metadata(json.loads(json.dumps(meta)))],
                       source=file_image_source(tmp_path / "a"))
    assert stats.accepted == 1
    assert np.array_equal(load_entry(out[0], tmp_path / "b").image, load_entry(entries[0], tmp_path / "a").image)
