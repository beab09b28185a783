import time

import pytest

from helpers import ACCEPTANCE, run_json


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """Default desk-scale corpus, written once through the CLI."""
    root = tmp_path_factory.mktemp("desk") / "corpus"
    t0 = time.perf_counter()
    run_json("gen-data", "--out-dir", root, "--seed", 0)
    return {"manifest": root / "manifest.jsonl", "root": root, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def desk_model(desk_corpus, tmp_path_factory):
    """Model trained with the default configuration, then calibrated on the calib split."""
    ckpt = tmp_path_factory.mktemp("model") / "desk.clid"
    t0 = time.perf_counter()
    lines = run_json("train", "--manifest", desk_corpus["manifest"], "--checkpoint", ckpt, "--seed", 0, "--workers", 1)
    train_seconds = time.perf_counter() - t0
    thresholds = run_json("calibrate", "--checkpoint", ckpt, "--manifest", desk_corpus["manifest"])[0]
    return {
        "checkpoint": ckpt,
        "epochs": [ln for ln in lines if "epoch" in ln],
        "train_seconds": train_seconds,
        "thresholds": thresholds,
    }


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
