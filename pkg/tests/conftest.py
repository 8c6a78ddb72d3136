import re
from dataclasses import dataclass
from pathlib import Path

import pytest

from dualattn.cli import run

# Synthetic attribution task used by the acceptance suite and the end-to-end CLI test.
ACCEPTANCE_SYNTH = ["--len", "8", "--vocab", "16", "--d-in", "32", "--noise", "0.1", "--mixing-seed", "0"]
ACCEPTANCE_TRAIN = ["--d-model", "64", "--heads", "4", "--enc-layers", "2", "--dec-layers", "2",
                    "--ffn", "128", "--dropout", "0.1", "--lr", "1e-3", "--weight-decay", "1e-4",
                    "--batch", "32", "--epochs", "30", "--clip", "1.0", "--seed", "0"]


@dataclass(frozen=True)
class AcceptanceRun:
    train: Path
    val: Path
    test: Path
    ckpt: Path
    seconds: float


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory) -> AcceptanceRun:
    """Train the acceptance model once through the CLI and share it across tests."""
    import time

    root = tmp_path_factory.mktemp("acceptance")
    paths = {name: root / f"{name}.jsonl" for name in ("train", "val", "test")}
    for (name, n), seed in zip((("train", 2000), ("val", 200), ("test", 200)), (0, 2, 1)):
        assert run(["synth", "--n", str(n), "--seed", str(seed), *ACCEPTANCE_SYNTH, "--out", str(paths[name])]) == 0
    ckpt = root / "model.pxad"
    start = time.perf_counter()
    code = run(["train", "--data", str(paths["train"]), "--val-data", str(paths["val"]), *ACCEPTANCE_TRAIN,
                "--out", str(ckpt)])
    assert code == 0
    return AcceptanceRun(paths["train"], paths["val"], paths["test"], ckpt, time.perf_counter() - start)


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m and rep.when in ("call", "setup"):
                prev = outcomes.get(int(m.group(1)))
                if prev is None or key != "passed":
                    outcomes[int(m.group(1))] = (m.group(2).replace("_", " "), key)
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcomes):
        name, key = outcomes[n]
        terminalreporter.write_line(f"criterion {n} ({name}): {'PASS' if key == 'passed' else 'FAIL'}")
