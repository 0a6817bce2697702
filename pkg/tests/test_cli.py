import json

import pytest

from boostgan import cli, trainer
from boostgan.facedata import load_manifest, write_manifest
from test_trainer import tiny_config, tiny_extractor


@pytest.fixture(scope="module")
def two_record_manifest(fixture_manifest_path, fixture_manifest):
    # next to the fixture so relative image paths still resolve
    path = fixture_manifest_path.parent / "two.jsonl"
    write_manifest(path, fixture_manifest.records[:2])
    return path


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, fixture_manifest_path, fixture_manifest):
    out = tmp_path_factory.mktemp("ckpt")
    state = trainer.init_state(tiny_config(fixture_manifest_path), fixture_manifest, tiny_extractor())
    trainer.save_state(state, out / "g.pt")
    trainer.save_extractor(state.models.extractor, out / "ext.pt")
    return out


def test_occlude_writes_quadruples_and_sidecars(tmp_path, two_record_manifest):
    assert cli.main(["occlude", "--manifest", str(two_record_manifest), "--out", str(tmp_path / "a")]) == 0
    pngs = sorted((tmp_path / "a").glob("*.png"))
    sidecars = sorted((tmp_path / "a").glob("*.json"))
    assert len(pngs) == 8 and len(sidecars) == 2
    manifest = load_manifest(two_record_manifest)
    for i, path in enumerate(sidecars):
        data = json.loads(path.read_text())
        kps = manifest.records[i].keypoints.as_list()
        assert [o["center"] for o in data["occlusions"]] == [[round(x), round(y)] for x, y in kps]
        assert all(o["size"] == 32 and o["fill_value"] == 1.0 for o in data["occlusions"])


@pytest.mark.parametrize("mode", ["keypoint", "random"])
def test_occlude_byte_identical_rerun(tmp_path, two_record_manifest, mode):
    for d in ("a", "b"):
        cli.main(["occlude", "--manifest", str(two_record_manifest), "--mode", mode,
                  "--seed", "7", "--out", str(tmp_path / d)])
    a = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()}
    b = {p.name: p.read_bytes() for p in (tmp_path / "b").iterdir()}
    assert a == b and len(a) == 10


def test_occlude_does_not_touch_inputs(tmp_path, two_record_manifest):
    before = two_record_manifest.read_bytes()
    cli.main(["occlude", "--manifest", str(two_record_manifest), "--out", str(tmp_path / "a")])
    assert two_record_manifest.read_bytes() == before


def test_synthesize_one_image(tmp_path, checkpoint, fixture_manifest):
    image = fixture_manifest.resolve(fixture_manifest.records[0].profile_path)
    rc = cli.main(["synthesize", "--checkpoint", str(checkpoint / "g.pt"), "--mode", "random",
                   "--out", str(tmp_path / "s"), str(image)])
    assert rc == 0
    names = sorted(p.name for p in (tmp_path / "s").iterdir())
    stem = image.stem
    assert names == sorted([f"{stem}_c{k}.png" for k in range(1, 5)] + [f"{stem}_boost.png"])


def test_synthesize_raw_image_needs_random_mode(tmp_path, checkpoint, fixture_manifest, capsys):
    image = fixture_manifest.resolve(fixture_manifest.records[0].profile_path)
    rc = cli.main(["synthesize", "--checkpoint", str(checkpoint / "g.pt"),
                   "--out", str(tmp_path / "s"), str(image)])
    assert rc == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "--mode" in err[0]


def test_synthesize_manifest(tmp_path, checkpoint, two_record_manifest):
    rc = cli.main(["synthesize", "--checkpoint", str(checkpoint / "g.pt"),
                   "--manifest", str(two_record_manifest), "--out", str(tmp_path / "s")])
    assert rc == 0
    assert len(list((tmp_path / "s").glob("*.png"))) == 10


def test_evaluate_rank1_json(tmp_path, checkpoint, fixture_manifest_path):
    out = tmp_path / "report.json"
    rc = cli.main(["evaluate", "--checkpoint", str(checkpoint / "g.pt"), "--extractor",
                   str(checkpoint / "ext.pt"), "--manifest", str(fixture_manifest_path),
                   "--out", str(out)])
    assert rc == 0
    report = json.loads(out.read_text())
    assert report["protocol"] == "rank1"
    assert set(report["rank1"]) == {"15", "30", "45", "60"}
    assert all(0.0 <= v <= 1.0 for v in report["rank1"].values())


def test_evaluate_verify(tmp_path, checkpoint, fixture_manifest_path, capsys):
    rc = cli.main(["evaluate", "--checkpoint", str(checkpoint / "g.pt"), "--extractor",
                   str(checkpoint / "ext.pt"), "--manifest", str(fixture_manifest_path),
                   "--protocol", "verify", "--baseline"])
    assert rc == 0
    assert "AUC" in capsys.readouterr().out


def test_gradcheck_exit_zero(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in ("adv_d_loss", "adv_g_loss", "identity_loss", "pixel_multiscale_loss",
                 "symmetry_loss", "tv_loss"):
        assert name in out
    assert "FAIL" not in out


def test_train_from_config(tmp_path, fixture_manifest_path, checkpoint):
    cfg = tiny_config(fixture_manifest_path, tmp_path / "run", total_steps=1,
                      extractor=str(checkpoint / "ext.pt")).to_json()
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json")]) == 0
    assert (tmp_path / "run" / "final.pt").exists()


def test_train_unknown_key_one_line(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"manifest": "x", "batchsize": 3}))
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "batchsize" in err[0]


def test_missing_checkpoint_one_line(tmp_path, two_record_manifest, capsys):
    rc = cli.main(["synthesize", "--checkpoint", str(tmp_path / "nope.pt"),
                   "--manifest", str(two_record_manifest), "--out", str(tmp_path / "s")])
    assert rc == 1
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_fixture_command(tmp_path, capsys):
    assert cli.main(["fixture", "--out", str(tmp_path / "fx"), "--identities", "2"]) == 0
    assert len(load_manifest(tmp_path / "fx" / "manifest.jsonl")) == 8
