import base64
import json
import subprocess
import sys

import numpy as np
import pytest


def records(path):
    """All JSON records of a trace file, in order."""
    with open(path, "rb") as fp:
        return [json.loads(line) for line in fp.read().decode("utf-8").splitlines()]


def matrix(payload):
    raw = base64.b64decode(payload["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(payload["rows"], payload["cols"])


@pytest.fixture(scope="session")
def engine():
    """Command prefix for the verification engine's CLI; skips when the
    engine package is not installed in this environment."""
    probe = subprocess.run(
        [sys.executable, "-c", "import loosespec"], capture_output=True
    )
    if probe.returncode != 0:
        pytest.skip("verification engine not installed; conformance tests need its CLI")
    return [sys.executable, "-m", "loosespec.cli"]
