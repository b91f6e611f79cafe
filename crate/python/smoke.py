"""Smoke test for the pygssm extension module."""

import json
import math
import subprocess
import sys
import tempfile
from pathlib import Path

import pygssm


def check_scores():
    p = pygssm.LognormalParams(0.0, 0.0)
    assert abs(pygssm.gssm_score(1.0, p)) < 1e-9
    m = pygssm.gssm_score(math.exp(-1.0), p)
    assert abs(m - 0.6034) < 1e-4, m
    assert abs(pygssm.conflict_probability(1.0, p, 0.0) - 0.5) < 1e-9
    assert abs(pygssm.negative_log_likelihood(p, 1.0) - 0.918939) < 1e-6
    assert pygssm.js_divergence(p, p) < 1e-10
    ttc = pygssm.baseline("ttc2d", (0, 0, 10, 0, 0, 4.5, 1.8), (20, 0, 5, 0, 0, 4.5, 1.8))
    assert abs(ttc - 15.5 / 5.0) < 1e-9, ttc


def check_pipeline(root: Path, cli: str | None):
    spec = {"n_train_events": 300, "n_test_events": 3, "objects_per_event": 2, "seed": 3}
    n = pygssm.generate_dataset(str(root / "data"), json.dumps(spec))
    assert n == 303
    event = pygssm.Event.load(str(root / "data" / "test" / "test_000000.csv"))
    assert event.subject_id == "ego" and event.object_ids == ["obj1", "obj2"]
    assert event.impact_time is not None
    rebuilt = event.reconstruct()
    assert len(rebuilt.frames("obj1")) == len(event.frames("obj1"))
    if cli is None:
        return
    config = root / "config.json"
    config.write_text(json.dumps({
        "model": {"repr_dim": 8, "attention_blocks": 1, "heads": 2, "current_layers": 1, "env_layers": 1,
                  "head_layers": 1, "random_tokens": 1, "batch": 32, "max_epochs": 2},
        "training": {"val_fraction": 0.2},
    }))
    subprocess.run([cli, "train", "--config", str(config), "--data", str(root / "data"),
                    "--out", str(root / "model.ckpt")], check=True, capture_output=True)
    model = pygssm.Model.load(str(root / "model.ckpt"))
    series = model.risk_series(event, "obj1")
    assert len(series) == len(event.frames("obj1"))
    report = json.loads(pygssm.evaluate(model, str(root / "data" / "test")))
    assert "gssm" in report and "fixed_spacing" in report


def main():
    check_scores()
    cli = sys.argv[1] if len(sys.argv) > 1 else None
    with tempfile.TemporaryDirectory() as tmp:
        check_pipeline(Path(tmp), cli)
    print("pygssm smoke test passed")


if __name__ == "__main__":
    main()
