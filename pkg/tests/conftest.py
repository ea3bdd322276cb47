import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conceptroute.dataset import RecordTable, split_dataset, synthesize_dataset  # noqa: E402
from conceptroute.defaults import default_synth_config  # noqa: E402

# (criterion number, passed, detail) appended by test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


class Small:
    """A 600-record synthetic set for fast unit tests."""

    def __init__(self):
        cfg = default_synth_config().replace(n_records=600)
        self.records, self.schema, self.catalog, self.truth = synthesize_dataset(cfg, 3)
        self.table = RecordTable.from_records(self.records)
        self.split = split_dataset(len(self.table), 3)
        self.train = self.table.subset(self.split.train)
        self.val = self.table.subset(self.split.validation)
        self.test = self.table.subset(self.split.test)


@pytest.fixture(scope="session")
def small():
    return Small()


@pytest.fixture(scope="session")
def small_bottleneck(small):
    from conceptroute.training import concept_config, suitability_config, train_bottleneck

    router, _, _ = train_bottleneck(
        small.train, small.val, small.schema, small.catalog,
        concept_config(max_epochs=15, seed=1), suitability_config(max_epochs=15, seed=1),
    )
    return router
