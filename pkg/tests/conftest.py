import numpy as np
import pytest

from protoformer.data import SyntheticSpec, gen_synthetic_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four shape classes, 12 images each, 32x32 (fast unit-test data)."""
    spec = SyntheticSpec(images_per_class=12, image_size=32, seed=1)
    return gen_synthetic_dataset(spec, tmp_path_factory.mktemp("small"))


@pytest.fixture(scope="session")
def benchmark_dataset(tmp_path_factory):
    """The default synthetic benchmark: 4 classes x 50 images at 64x64."""
    return gen_synthetic_dataset(SyntheticSpec(), tmp_path_factory.mktemp("bench"))


def random_episode(rng, size=16, shots=1):
    from protoformer.data import Episode

    def mask():
        m = (rng.uniform((1, size, size)) > 0.5).astype(np.float32)
        m[0, size // 2, size // 2] = 1.0
        return m

    sup = [(rng.uniform((3, size, size)).astype(np.float32), mask()) for _ in range(shots)]
    return Episode(sup, rng.uniform((3, size, size)).astype(np.float32), mask(), class_id=0)


# criterion number -> (passed, one-line detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
