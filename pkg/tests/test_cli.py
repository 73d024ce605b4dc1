import json

import numpy as np
import pytest

from occluforge import io
from occluforge.cli import main
from occluforge.occlusion import occlusion_stats


def _config(tmp_path, **sections):
    base = {
        "toy": {"n_frames": 120, "n_sequences": 4},
        "solver": {"width": 16},
        "training": {"position_steps": 4, "rotation_steps": 4, "batch_size": 16, "holdout": 0.25},
        "simulation": {"frame_rate": 60.0},
    }
    for k, v in sections.items():
        base[k] = {**base.get(k, {}), **v} if isinstance(v, dict) else v
    path = tmp_path / "config.json"
    path.write_text(json.dumps(base))
    return path


@pytest.fixture(scope="module")
def container(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp)
    assert main(["toygen", "--config", str(cfg), "--out", str(tmp / "ds"), "--deterministic"]) == 0
    return tmp, cfg


def test_toygen_writes_container_and_manifest(container):
    tmp, _ = container
    assert (tmp / "ds" / "manifest.json").exists()
    man = json.loads((tmp / "ds" / "run_manifest.json").read_text())
    assert man["command"] == "toygen" and man["deterministic"] is True
    assert man["outputs"]["container"] == io.sha256_file(tmp / "ds" / "manifest.json")
    assert "config_sha256" in man and "versions" in man
    assert "time" not in json.dumps(man).lower()


def test_simulate_is_deterministic_and_agrees_with_stats(container, tmp_path, capsys):
    tmp, _ = container
    ds = tmp / "ds"
    cfg = _config(tmp_path, skeleton=str(ds / "skeleton.json"), mesh=str(ds / "mesh.json"),
                  layout=str(ds / "layout.json"), rig=str(ds / "rig.json"),
                  motion=str(ds / "sequences" / "seq0000.mocp"))
    hashes = []
    for name in ("a.mask", "b.mask"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        hashes.append(json.loads(capsys.readouterr().out)["sha256"])
    assert hashes[0] == hashes[1] == io.sha256_file(tmp_path / "a.mask")
    # the simulated mask matches the one stored in the container
    stored = io.load_mask(ds / "sequences" / "seq0000.mask")
    assert np.array_equal(io.load_mask(tmp_path / "a.mask").visible, stored.visible)

    assert main(["stats", "--config", str(cfg), "--mask", str(tmp_path / "a.mask"),
                 "--out", str(tmp_path / "s.csv")]) == 0
    printed = json.loads(capsys.readouterr().out)
    direct = occlusion_stats(stored)
    assert np.allclose(printed["occl_prob"], direct.probability, atol=0, rtol=0)
    assert list(io.load_stats_csv(tmp_path / "s.csv").marker_names) == list(io.load_layout(ds / "layout.json").names)


def test_corrupt_writes_frames(container, tmp_path):
    tmp, _ = container
    ds = tmp / "ds"
    cfg = _config(tmp_path, skeleton=str(ds / "skeleton.json"), mesh=str(ds / "mesh.json"),
                  layout=str(ds / "layout.json"), motion=str(ds / "sequences" / "seq0001.mocp"))
    out = tmp_path / "f.mfrm"
    assert main(["corrupt", "--config", str(cfg), "--mask", str(ds / "sequences" / "seq0001.mask"),
                 "--seed", "3", "--out", str(out)]) == 0
    block = io.load_frames(out)
    mask = io.load_mask(ds / "sequences" / "seq0001.mask")
    assert not np.any(block.visible & ~mask.visible)
    assert (tmp_path / "f.mfrm.manifest.json").exists()


def test_oracle_eval_scores_zero(container, tmp_path, capsys):
    tmp, cfg = container
    out = tmp_path / "eval.csv"
    assert main(["eval", "--config", str(cfg), "--dataset", str(tmp / "ds"), "--oracle",
                 "--split", "all", "--out", str(out)]) == 0
    rows = io.read_csv(out)
    overall = rows[-1]
    assert overall["bucket"] == "overall" and overall["frames"] == "120"
    assert float(overall["JPE_cm"]) == 0.0 and float(overall["JOE_deg"]) == 0.0
    assert (tmp_path / "eval_joints.csv").exists()


def test_train_twice_gives_identical_checkpoints(container, tmp_path, capsys):
    tmp, cfg = container
    digests = []
    for name in ("a.ofck", "b.ofck"):
        assert main(["train", "--config", str(cfg), "--dataset", str(tmp / "ds"), "--deterministic",
                     "--seed", "5", "--out", str(tmp_path / name)]) == 0
        digests.append(json.loads(capsys.readouterr().out)["sha256"])
    assert digests[0] == digests[1]
    assert (tmp_path / "a.ofck").read_bytes() == (tmp_path / "b.ofck").read_bytes()
    curve = io.read_csv(tmp_path / "a.ofck.loss.csv")
    assert list(curve[0]) == ["step", "L_Mocc", "L_Mshift", "L_J", "L_P", "L_rot"]

    assert main(["eval", "--config", str(cfg), "--dataset", str(tmp / "ds"),
                 "--checkpoint", str(tmp_path / "a.ofck"), "--out", str(tmp_path / "e.csv")]) == 0
    man = json.loads((tmp_path / "e.csv.manifest.json").read_text())
    assert man["outputs"]["fingerprint"]["model"] == digests[0]

    assert main(["chain-report", "--config", str(cfg), "--dataset", str(tmp / "ds"),
                 "--checkpoint", str(tmp_path / "a.ofck"), "--token", "11",
                 "--out", str(tmp_path / "c.csv")]) == 0
    rows = io.read_csv(tmp_path / "c.csv")
    assert len(rows) == 17
    assert sum(float(r["weight"]) for r in rows) == pytest.approx(1.0, abs=1e-6)


def test_train_ablations_run(container, tmp_path, capsys):
    tmp, cfg = container
    for ab in ("no-chain", "no-decouple"):
        out = tmp_path / f"{ab}.ofck"
        assert main(["train", "--config", str(cfg), "--dataset", str(tmp / "ds"),
                     "--ablation", ab, "--out", str(out)]) == 0
        assert main(["eval", "--config", str(cfg), "--dataset", str(tmp / "ds"),
                     "--checkpoint", str(out), "--out", str(tmp_path / f"{ab}.csv")]) == 0
    # the merged checkpoint has no decoder chain to report on
    assert main(["chain-report", "--config", str(cfg), "--dataset", str(tmp / "ds"),
                 "--checkpoint", str(tmp_path / "no-decouple.ofck"), "--token", "0"]) == 1


def test_oversample(container, tmp_path, capsys):
    tmp, _ = container
    ds = str(tmp / "ds")
    cfg = _config(tmp_path, oversampling={"occlusion_threshold": 0.0})
    assert main(["oversample", "--config", str(cfg), "--dataset", ds,
                 "--out", str(tmp_path / "o.json")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["original"] == out["resampled"] == 4
    cfg = _config(tmp_path, oversampling={"occlusion_threshold": 1.0})
    assert main(["oversample", "--config", str(cfg), "--dataset", ds]) == 2


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--samples", "20", "--out", str(tmp_path / "g.csv")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert set(summary) >= {"affine", "attention", "position_loss", "rotation_loss"}
    assert all(v["passed"] for v in summary.values())
    rows = io.read_csv(tmp_path / "g.csv")
    assert all(r["passed"] == "True" for r in rows)


def test_exit_codes_and_json_errors(tmp_path, capsys):
    assert main(["no-such-command"]) == 1
    assert main(["stats", "--json-errors"]) == 1  # missing --mask
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 1 and err["error"] == "UsageError"

    bad = tmp_path / "bad.mask"
    bad.write_bytes(b"MASK" + b"\x00" * 6)
    assert main(["stats", "--mask", str(bad), "--json-errors"]) == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ParseError" and "offset" in err

    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"solver": {"kernel": 4}}))
    assert main(["gradcheck", "--config", str(cfg)]) == 1
    cfg.write_text(json.dumps({"unknown_key": 1}))
    assert main(["gradcheck", "--config", str(cfg)]) == 1
    assert main(["eval", "--dataset", str(tmp_path / "missing")]) == 1
    assert main(["train", "--threads", "0"]) == 1
