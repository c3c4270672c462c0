import json

import pytest

from osimark.cipher import WatermarkKey

SMALL_PIPELINE = {"shape": [2, 8, 8], "image_hw": [16, 16], "steps_gen": 10}


@pytest.fixture
def workspace(tmp_path):
    """A config file plus key in a fresh directory, sized for quick runs."""
    cfg = {
        "pipeline": SMALL_PIPELINE,
        "key": "key.bin",
        "f_hw": 2,
        "n_images": 12,
        "extractors": [{"kind": "multistep", "steps": 10}, {"kind": "frozen"}],
        "fpr_targets": [1e-2, 1e-6],
        "base_seed": 5,
        "data_dir": "data",
        "n_train": 40,
        "train": {"epochs": 2, "batch": 8, "lr": 1e-3, "aug_prob": 0.5, "strategy": "default", "seed": 0},
    }
    (tmp_path / "exp.json").write_text(json.dumps(cfg))
    WatermarkKey.from_seed(0).save(tmp_path / "key.bin")
    return tmp_path


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record():
    """Log one acceptance criterion outcome for the end-of-run summary."""

    def _record(name, ok, detail=""):
        ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
