import pytest
from threadpoolctl import threadpool_limits

from qctc.ctc import Vocab
from qctc.tasks import TaskSpec, generate
from qctc.training import TrainConfig, default_model_config, train_student, train_teacher

SMALL = dict(d_model=32, n_heads=4, n_enc_layers=1, n_dec_layers=1)


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    with threadpool_limits(1):
        yield


@pytest.fixture
def abc():
    """Output vocabulary {-, a, b, c}."""
    return Vocab.from_names(["-", "a", "b", "c"])


@pytest.fixture(scope="session")
def copy_ds():
    return generate(TaskSpec("copy", seed=1, n_train=2000, n_test=200, min_len=2, max_len=6))


@pytest.fixture(scope="session")
def copy_nar(copy_ds):
    return train_student(copy_ds, TrainConfig(epochs=15, lr=3e-3, seed=1),
                         default_model_config(copy_ds, "lqt_parallel", **SMALL))


@pytest.fixture(scope="session")
def copy_ar(copy_ds):
    return train_teacher(copy_ds, TrainConfig(epochs=15, lr=3e-3, seed=1),
                         default_model_config(copy_ds, "autoregressive", **SMALL))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
