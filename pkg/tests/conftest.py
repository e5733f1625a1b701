import numpy as np
import pytest

from viewgen import autodiff as ad


@pytest.fixture(autouse=True)
def float64():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory):
    from viewgen.data import build_dataset

    root = tmp_path_factory.mktemp("data") / "ds"
    build_dataset(6, 3, 64, 64, root)
    return root


@pytest.fixture(scope="session")
def small_data(small_data_dir):
    from viewgen.data import load_dataset

    return load_dataset(small_data_dir)


@pytest.fixture(scope="session")
def paired_data(tmp_path_factory):
    """Shapes 2k and 2k+1 share one texture program."""
    from viewgen.data import build_dataset, load_dataset

    root = tmp_path_factory.mktemp("pairs") / "ds"
    build_dataset(8, 5, 64, 64, root, same_texture_pairs=True)
    return load_dataset(root)


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the flag."""
    table = request.config.stash.setdefault(_VERDICTS, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        table[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_VERDICTS, {})
    if not table:
        return
    terminalreporter.write_sep("=", "acceptance")
    for n in range(1, 10):
        terminalreporter.write_line(table.get(n, f"criterion {n}: NOT RUN"))
