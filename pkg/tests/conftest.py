import numpy as np
import pytest

from highres3d import network
from highres3d.volume_io import SyntheticSpec, generate_synthetic


def micro_spec(num_classes=3, head_width=None, residual=True, stages=((1, 3, 1), (2, 4, 1)), first=2):
    """Two residual blocks, receptive field 15: cheap enough for exhaustive checks."""
    return network.build_architecture(stages, num_classes, first_width=first, head_width=head_width,
                                      residual=residual, variant="micro")


def micro_model(seed=0, dtype=np.float32, **kw):
    spec = micro_spec(**kw)
    return spec, network.init_parameters(spec, np.random.default_rng(seed), dtype=dtype)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A tiny 20^3 synthetic dataset on disk."""
    root = tmp_path_factory.mktemp("small")
    spec = SyntheticSpec(size=20, counts={"train": 2, "validation": 1, "test": 1}, seed=3)
    return generate_synthetic(spec, root)


def pytest_terminal_summary(terminalreporter):
    from checks import VERDICTS
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
