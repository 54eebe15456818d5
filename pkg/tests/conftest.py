import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from numcqa.kg import KnowledgeGraph, augment_numerical_edges, make_synthetic_kg  # noqa: E402

CRITERIA: dict = {}


def record_criterion(num: int, name: str, passed: bool, detail: str = "") -> None:
    CRITERIA[num] = (name, passed, detail)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        name, passed, detail = CRITERIA[num]
        terminalreporter.write_line(f"criterion {num} [{name}]: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def city_kg():
    """Cities with latitudes; Tokyo and Osaka are in Japan."""
    ents = ("Tokyo", "Osaka", "Japan", "Oslo", "Cairo", "Quito")
    lats = {"Tokyo": 35.7, "Osaka": 34.7, "Oslo": 59.9, "Cairo": 30.0, "Quito": -0.2}
    values = tuple((v, "Degree") for v in sorted(set(lats.values())))
    vid = {v: i for i, (v, _) in enumerate(values)}
    eid = {e: i for i, e in enumerate(ents)}
    rel = {(eid["Tokyo"], 0, eid["Japan"]), (eid["Osaka"], 0, eid["Japan"]), (eid["Japan"], 1, eid["Tokyo"]),
           (eid["Japan"], 1, eid["Osaka"])}
    attr = {(eid[c], 0, vid[v]) for c, v in lats.items()}
    g = KnowledgeGraph(ents, ("locatedIn", "hasCity"), ("lat",), ("Degree",), values,
                       frozenset(rel), frozenset(attr), frozenset())
    return augment_numerical_edges(g, 4000, 0)


@pytest.fixture(scope="session")
def small_kg():
    return augment_numerical_edges(make_synthetic_kg(40, 3, 3, 24, 0.06, 3, n_clusters=4), 200, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
