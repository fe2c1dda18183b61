import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_model():
    from vdress.model import DressingModel

    return DressingModel()


@pytest.fixture(scope="session")
def tiny_cfg():
    from vdress.unet import ModelConfig

    return ModelConfig(levels=(8, 16), heads=2, dim=16, latent_shape=(4, 4, 4), text_length=4,
                       garment_queries=2, temb_dim=16, groups=4)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, shown inline and in the summary."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def report(name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
