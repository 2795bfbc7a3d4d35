import numpy as np
import pytest

from vmae.backbone import ModelConfig, ModelParams, init_params
from vmae.dataio import Batch
from vmae.seeding import derive_rng
from vmae.structural_prior import extract_edges

_CRITERION_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Collect acceptance-criterion verdict lines for the end-of-run summary."""

    def _record(line: str) -> None:
        _CRITERION_LINES.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        image_size=32,
        patch_size=8,
        d_enc=16,
        d_dec=8,
        enc_depth=2,
        dec_depth=1,
        enc_heads=2,
        dec_heads=2,
        distill_dim=8,
        sem_dim=8,
    )


def generic_params(config: ModelConfig, seed: int = 123, spread: float = 0.2) -> ModelParams:
    """Parameters pushed away from init so no gradient path is degenerate."""
    params = init_params(config, 0)
    rng = derive_rng(seed, "generic")
    for tensor in params.tensors.values():
        tensor += spread * rng.standard_normal(tensor.shape)
    return params


def make_batch(
    config: ModelConfig,
    batch_size: int = 2,
    seed: int = 7,
    captions=None,
) -> Batch:
    rng = np.random.default_rng(seed)
    s = config.image_size
    images = rng.uniform(0.0, 1.0, size=(batch_size, s, s, 3))
    sketches = np.stack([extract_edges(im) for im in images])
    if captions is None:
        captions = [
            f"a test vehicle number {i}" if i % 2 == 0 else None for i in range(batch_size)
        ]
    return Batch(
        images=images,
        sketches=sketches,
        captions=list(captions),
        attributes=np.zeros((batch_size, 12), dtype=np.int8),
        identities=np.zeros(batch_size, dtype=np.int64),
        fine_labels=np.zeros(batch_size, dtype=np.int64),
        record_ids=np.arange(batch_size, dtype=np.int64),
        seed=seed,
    )
