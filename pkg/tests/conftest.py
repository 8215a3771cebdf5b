from fractions import Fraction

import pytest

from phnn.model import ModelConfig
from phnn.synth import write_corpus
from phnn.train import TrainConfig

TOY_CONFIG = """\
# small, fast settings for CLI tests
num_stages=3
width_multiplier=1/16
seed=1
steps=6
batch_size=4
default_stride=8
folds=2
"""


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    write_corpus(out, 5, seed=11)
    return out


@pytest.fixture(scope="session")
def toy_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "toy.cfg"
    p.write_text(TOY_CONFIG, encoding="utf-8")
    return p


@pytest.fixture
def small_model_config():
    return ModelConfig(num_stages=3, width_multiplier=Fraction(1, 16), seed=2)


@pytest.fixture
def quick_train_config():
    return TrainConfig(steps=5, batch_size=4, seed=3, default_stride=8)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        terminalreporter.write_line(verdicts[number])
