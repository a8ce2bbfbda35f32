import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sa2fe.puzzle import Scheme, puzzle_setup  # noqa: E402
from sa2fe.rng import DrbgRandom  # noqa: E402
from sa2fe.scenario import builtin_config, key_material  # noqa: E402

VECTORS = Path(__file__).parent / "vectors"


def load_vectors(name: str = "golden.hex") -> dict[str, bytes]:
    out = {}
    for line in (VECTORS / name).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, value = line.split()
        out[key] = bytes.fromhex(value if len(value) % 2 == 0 else "0" + value)
    return out


@pytest.fixture
def rng():
    return DrbgRandom("tests")


@pytest.fixture(scope="session")
def fast_config():
    """Two-service topology with 2048-bit RSA so key generation stays cheap."""
    return builtin_config("two-service").with_(rsa_bits=2048)


@pytest.fixture(scope="session")
def fast_keys(fast_config):
    return key_material(fast_config)


@pytest.fixture(scope="session", params=[Scheme.UNIVERSAL_REENC, Scheme.BILINEAR], ids=["ur", "bilinear"])
def real_params(request):
    return puzzle_setup(request.param, 128, DrbgRandom(f"params/{request.param.name}"))


@pytest.fixture(params=[Scheme.UNIVERSAL_REENC, Scheme.BILINEAR], ids=["ur", "bilinear"])
def toy_params(request):
    return puzzle_setup(request.param, rng=DrbgRandom("toy"), insecure_test=True)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
