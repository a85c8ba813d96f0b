import pytest
import torch

from ldsim.data import question_rates, split_dataset
from ldsim.knowledge import ConceptRelationGraph
from ldsim.model import Simulator, build_hier_graph
from ldsim.synthetic import generate_irt_benchmark

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_bench():
    return generate_irt_benchmark(n_students=24, n_steps=12, n_questions=10, n_concepts=6,
                                  n_edges=5, seed=3)


@pytest.fixture(scope="session")
def small_graph(small_bench):
    ds = small_bench.dataset
    return build_hier_graph(ConceptRelationGraph(ds.concepts, small_bench.prerequisites), ds.questions)


@pytest.fixture(scope="session")
def small_rates(small_bench):
    return question_rates(small_bench.dataset.histories)


@pytest.fixture
def small_model(small_graph):
    torch.manual_seed(0)
    model = Simulator(small_graph, d=16, levels=4)
    model.eval()
    return model


@pytest.fixture(scope="session")
def small_splits(small_bench):
    return split_dataset(small_bench.dataset.histories, (0.8, 0.1, 0.1), seed=0)
