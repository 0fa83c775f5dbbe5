import time

import pytest

from twinforge.models import BiGRUClassifier, DenoisingAutoencoder
from twinforge.telemetry import build_reference_split

# (criterion number, title, passed, detail), filled by test_acceptance.py
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def reference_split():
    return build_reference_split(dt_count=4, cycles_per_dt=132, seed=7, train_fraction=0.8)


@pytest.fixture(scope="session")
def reference_run(reference_split):
    """Default-config DAE and classifier trained once on the reference split."""
    split = reference_split
    t0 = time.perf_counter()
    dae = DenoisingAutoencoder(random_state=7)
    dae.fit(split.train_X, eval_set=split.test_X)
    t1 = time.perf_counter()
    Ztr, Zte = dae.transform(split.train_X), dae.transform(split.test_X)
    clf = BiGRUClassifier(n_classes=split.n_classes, random_state=7)
    clf.fit(Ztr, split.train_y, eval_set=(Zte, split.test_y))
    t2 = time.perf_counter()
    return {"split": split, "dae": dae, "clf": clf, "Z_train": Ztr, "Z_test": Zte,
            "dae_seconds": t1 - t0, "clf_seconds": t2 - t1}


@pytest.fixture(scope="session")
def small_split():
    from twinforge.telemetry import (
        generate_synthetic,
        normalize_and_split,
        window_cycles,
    )

    cycles = generate_synthetic(3, 12, seed=5)
    return normalize_and_split(window_cycles(cycles), 0.75, seed=5)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {title}: {detail}")
