import numpy as np
import pytest

from ega.codec import CodecModel, load_checkpoint, save_checkpoint
from ega.fedsim.experiment import DataConfig, build_federation
from ega.pretrain import PretrainConfig, train_codec

# (criterion number, passed, detail) rows collected by the acceptance module
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {detail}")


@pytest.fixture
def record():
    def add(number, passed, detail):
        ACCEPTANCE.append((number, bool(passed), detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return add


class CodecCache:
    """Trains each distinct config once per session, and round-trips it
    through the checkpoint format so tests use exactly what the CLI would."""

    def __init__(self, root):
        self.root = root
        self.reports = {}
        self.models = {}

    def get(self, cfg):
        key = tuple(sorted(vars(cfg).items()))
        if key not in self.models:
            model, report = train_codec(cfg)
            path = self.root / f"codec_{len(self.models)}.ckpt"
            save_checkpoint(model, path)
            self.models[key] = load_checkpoint(path)
            self.reports[key] = report
        return self.models[key]

    def report(self, cfg):
        self.get(cfg)
        return self.reports[tuple(sorted(vars(cfg).items()))]


@pytest.fixture(scope="session")
def codecs(tmp_path_factory):
    return CodecCache(tmp_path_factory.mktemp("codecs"))


DESK = PretrainConfig.desk(b=64, h=64, s=8, m=5)
# codec for the MNIST runs: m=10 clients per round, fine quantization
FL_CODEC = PretrainConfig(b=64, h=64, s=64, m=10, epochs=60, train_groups=5000,
                          test_groups=500, batch_size=16)
ATTACK_CODEC = PretrainConfig.desk(b=64, h=64, s=64, m=10)


@pytest.fixture(scope="session")
def desk_codec(codecs):
    return codecs.get(DESK)


@pytest.fixture(scope="session")
def mnist():
    return build_federation(DataConfig())


@pytest.fixture
def small_codec():
    return CodecModel.build(8, 4, 4, 3, rng=np.random.default_rng(0))
