import numpy as np
import pytest

from stegolm.config import Geometry, ModelConfig, RunConfig, StageConfig

ACCEPTANCE_RESULTS: list[str] = []


def record_acceptance(number: int, description: str, passed: bool) -> None:
    """Collect one pass/fail line per acceptance criterion; printed in the
    terminal summary so the verdicts survive output capturing."""
    line = f"ACCEPTANCE {number:02d} {'PASS' if passed else 'FAIL'}  {description}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)


def micro_run_config(**overrides) -> RunConfig:
    """Smallest usable configuration: fast to construct and train."""
    defaults = dict(
        seed=0,
        geometry=Geometry(3, 64, 64, 16),
        model=ModelConfig(
            preset="tiny", d_emb=64, n_layers=1, n_heads=4, d_ff=128,
            max_seq_len=256, base_vocab_size=256,
        ),
        stage1=StageConfig(stage=1, steps=2, batch_size=4, warmup_steps=1),
        stage2=StageConfig(stage=2, steps=2, batch_size=4, warmup_steps=1, lambda_emb=0.0),
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


def smooth_covers(n: int, geom: Geometry, seed: int = 0) -> np.ndarray:
    """Low-frequency random covers in [0.25, 0.75], shaped (n, C, H, W)."""
    rng = np.random.default_rng(seed)
    block = max(1, geom.height // 8)
    out = []
    for _ in range(n):
        coarse = rng.uniform(
            0.25, 0.75, size=(geom.channels, geom.height // block, geom.width // block)
        )
        out.append(np.kron(coarse, np.ones((block, block))))
    return np.stack(out)


@pytest.fixture
def micro_config():
    return micro_run_config()


@pytest.fixture
def micro_system(micro_config):
    from stegolm.training import build_system

    return build_system(micro_config, seed=0)
