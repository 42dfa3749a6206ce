import pytest

from lsda.synth import SynthConfig, generate

# acceptance criterion id -> one-line verdict, filled in by test_acceptance.py
VERDICTS: dict[str, str] = {}


@pytest.fixture(scope="session")
def synthetic_data(tmp_path_factory):
    """Small K=8 corpus shared by the training tests."""
    root = tmp_path_factory.mktemp("synth")
    manifests = generate(SynthConfig(K=8, m=4, cls_per_class=50, det_per_class=20, eval_images=20, seed=11), root)
    return root, manifests


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS, key=lambda k: int(k[1:])):
        terminalreporter.write_line(VERDICTS[key])
