import json

import numpy as np
import pytest

import hierdoc


def test_segment_plan_matches_count():
    windows = hierdoc.plan_segments(787, 200, 50)
    assert len(windows) == hierdoc.segment_count(787, 200, 50) == 13
    assert windows[0] == (0, 200)
    assert windows[-1][0] + windows[-1][1] == 787


def test_flops_ratios():
    seg = hierdoc.count_flops(4000)["total"] / hierdoc.count_flops(1000)["total"]
    assert seg == pytest.approx(77 / 17)
    full4 = hierdoc.count_flops(4000, mode="full_attention")
    full1 = hierdoc.count_flops(1000, mode="full_attention")
    assert full4["attention"] / full1["attention"] == 16.0
    with pytest.raises(ValueError):
        hierdoc.count_flops(10, mode="sparse")


def test_voting():
    p = np.array([[0.9, 0.1], [0.4, 0.6], [0.4, 0.6]])
    assert hierdoc.aggregate_average(p) == 0
    assert hierdoc.aggregate_most_frequent(p) == 1
    assert hierdoc.evaluate_accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)


def test_plateau_schedule():
    s = hierdoc.PlateauSchedule(1.0)
    lrs = [s.update(x) for x in (1.0, 1.1, 1.2, 1.3)]
    assert lrs == [1.0, 1.0, 1.0, 0.95]
    assert s.reductions == 1


def test_generate_task_xor_labels():
    docs, names = hierdoc.generate_task(
        kind="distributed_evidence", num_train=20, num_valid=2, num_test=2,
        min_length=600, max_length=600, segment_size=100, stride=50, seed=3)
    assert names == ["same", "different"]
    assert len(docs) == 24
    for d in docs:
        markers = [t for t in d["tokens"] if t.startswith("marker_")]
        assert len(markers) == 2
        assert d["label"] == int(markers[0] != markers[1])


def test_git_blob_hash():
    assert hierdoc.git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_cli_roundtrip(tmp_path):
    data = tmp_path / "d.jsonl"
    code, out, _ = hierdoc.run_cli([
        "gen-synthetic", "--task", "separable", "--out", str(data), "--num-train", "20",
        "--num-valid", "6", "--num-test", "6", "--length", "60", "--segment-size", "20",
        "--stride", "10"])
    assert code == 0 and "32 documents" in out
    code, out, _ = hierdoc.run_cli(["stats", "--data", str(data), "--out", str(tmp_path)])
    assert code == 0 and "N=32" in out
    code, _, err = hierdoc.run_cli(["stats", "--data", str(tmp_path / "none"), "--out", str(tmp_path)])
    assert code == 2 and "missing input" in err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"segmentation": {"stride": 0}}))
    code, _, err = hierdoc.run_cli(["finetune-encoder", "-c", str(cfg)])
    assert code == 1 and "segmentation.stride" in err
