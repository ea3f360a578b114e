import numpy as np
import pandas as pd
import pytest

from n400kit import synth
from n400kit.cli import preset_spec

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
        terminalreporter.write_line(line)


@pytest.fixture
def record(request):
    """Log a one-line PASS/FAIL verdict for an acceptance criterion."""
    def _record(cid, ok, detail):
        line = f"C{cid} {'PASS' if ok else 'FAIL'}: {detail}"
        request.config.stash[_ACCEPTANCE_KEY].append(line)
        print(line)
        return ok
    return _record


def random_lmm_table(rng, n, n_factors, n_covariates=2, level_range=(2, 9)):
    """Small random table with crossed grouping factors ``g0, g1, ...``."""
    data = {"y": rng.normal(size=n)}
    for j in range(n_covariates):
        data[f"x{j}"] = rng.normal(size=n)
    for g in range(n_factors):
        k = int(rng.integers(level_range[0], level_range[1] + 1))
        codes = rng.permutation(np.arange(n) % k)
        data[f"g{g}"] = [f"L{c}" for c in codes]
        data["y"] = data["y"] + rng.normal(scale=rng.uniform(0, 2), size=k)[codes]
    return pd.DataFrame(data)


@pytest.fixture(scope="session")
def small_synth():
    spec = preset_spec("exp1", seed=11, n_subjects=4, n_frames=6, n_electrodes=6)
    table, truth = synth.generate(spec)
    return spec, table, truth
