"""Smoke test for the dualcond_py extension.

Build and install first:
    maturin develop -m crates/python/Cargo.toml --release
Then run from the repository root:
    python python/smoke_test.py
"""

import json
import math
import pathlib
import tempfile

import dualcond_py as dc

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURE = ROOT / "fixtures" / "synthetic"


def check_math():
    assert dc.expand_bbox((100, 100, 200, 200), "1.3", (640, 480)) == (85, 85, 215, 215)
    assert dc.expand_bbox((0, 0, 100, 100), "3", (120, 120)) == (0, 0, 120, 120)
    assert dc.fusion_case(0.1) == ("text", 2.0, 0.0)
    assert dc.fusion_case(0.5) == ("both", 1.0, 1.0)
    assert dc.fusion_case(0.9) == ("visual", 0.0, 2.0)
    counts = dc.fusion_counts(10_000, seed=0)
    assert all(abs(c / 10_000 - 1 / 3) <= 0.02 for c in counts), counts
    assert math.isclose(dc.reg_l1([1, -1, 2, 0]), 1.0)
    assert math.isclose(dc.face_identity_loss([1, 0], [0, 1]), 1.0)
    assert math.isclose(dc.total_loss(0.5, 1.0, 2.0, 10.0), 0.54)


def check_config():
    cfg = dc.Config()
    cfg.set("train.max_steps", "5")
    assert cfg.get("train.max_steps") == "5"
    assert "lora.rank" in cfg.keys()
    try:
        cfg.set("train.warmup", "1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")


def check_pipeline(tmp):
    cfg = dc.Config()
    cfg.set("train.max_steps", "20")
    trainer = dc.Trainer(cfg, FIXTURE / "train")
    frozen = trainer.param_hash(False)
    first = trainer.step()
    assert first["step"] == 0 and first["total"] > 0
    trainer.run()
    assert trainer.step_count == 20
    assert trainer.param_hash(False) == frozen
    ckpt = tmp / "ckpt"
    ckpt_id = trainer.save(ckpt)
    assert dc.checkpoint_id(ckpt) == ckpt_id

    image = FIXTURE / "holdout" / "ada_ref.png"
    dc.preprocess(image, "33,28,62,63", tmp / "pre")
    dc.personalize(image, ckpt, tmp / "concept.bin")
    out = dc.generate(tmp / "concept.bin", "a photo of S*", tmp / "gen", n=2, seed=0)
    assert len(out["images"]) == 2, out
    pairs = [
        {"reference_path": "pre/target.png", "generated_path": f"gen/{i:03}.png", "group": "ada"}
        for i in range(2)
    ]
    (tmp / "pairs.json").write_text(json.dumps(pairs))
    dc.evaluate(tmp / "pairs.json", tmp / "report.json")
    report = json.loads((tmp / "report.json").read_text())
    assert report["groups"]["ada"]["count"] == 2
    assert "metadata" in report


def main():
    check_math()
    check_config()
    with tempfile.TemporaryDirectory() as d:
        check_pipeline(pathlib.Path(d))
    print("smoke test ok")


if __name__ == "__main__":
    main()
