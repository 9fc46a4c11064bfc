from dataclasses import dataclass

import pytest

from nanotune.data import default_domains, synth_generate
from nanotune.nn import ModelParams, frontnet
from nanotune.trainer import TrainConfig, pretrain


@dataclass
class World:
    arch: object
    params: ModelParams
    domain_a: list
    sequences: dict
    config: TrainConfig


@pytest.fixture(scope="session")
def tiny_world():
    """A small pretrained network and three short domain-B flights at 24x40."""
    a, b = default_domains(24, 40)
    recs_a, seqs = synth_generate(a, b, 400, seed=1, n_a=800)
    arch = frontnet((1, 24, 40), (4, 8, 8, 8), name="tiny")
    cfg = TrainConfig(lr=3e-3, batch_size=32, pretrain_epochs=6, seed=0)
    params, _ = pretrain(cfg, recs_a, arch)
    return World(arch, params, recs_a, seqs, cfg)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
