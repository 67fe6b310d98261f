import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_collection_modifyitems(items):
    # Acceptance criteria run in numeric order regardless of file position.
    items.sort(key=lambda it: (0, it.name) if "criterion" in it.name else (1, ""))


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if "criterion" not in name:
        return
    ACCEPTANCE_RESULTS[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{ACCEPTANCE_RESULTS[name]}  {name}")


@pytest.fixture(scope="session")
def shapes_dataset(tmp_path_factory):
    """8 synthetic 64x64 scenes written to disk, shared across tests."""
    from capdet.dataset_io import write_dataset
    from capdet.scenegen import SceneConfig, generate_dataset, with_image_size

    root = tmp_path_factory.mktemp("shapes")
    records = generate_dataset(0, 8, with_image_size(SceneConfig(), 64))
    manifest = write_dataset(records, root / "train")
    val_records = generate_dataset(100, 4, with_image_size(SceneConfig(), 64))
    val_manifest = write_dataset(val_records, root / "val")
    from capdet.scenegen import default_vocabulary
    vocab_path = root / "vocab.txt"
    default_vocabulary().save(vocab_path)
    return {"root": root, "manifest": manifest, "val_manifest": val_manifest,
            "vocab": vocab_path, "records": records}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
