import numpy as np
import pytest

from comlsim.autoencoders import FluxAutoencoder, PatchAutoencoder
from comlsim.engine import LatentModel
from comlsim.grid import GridSpec, Normalizer


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or acceptance checks")
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        request.config.stash[VERDICTS].append(line)
        print(line)
        return ok
    return record


def make_tiny_model(seed=0, weight_scale=1.0):
    """Untrained-ish 8x8-patch model on a 16x16 grid; contraction forced by weight scaling."""
    rng = np.random.default_rng(seed)
    patches = rng.standard_normal((64, 1, 8, 8))
    sol_ae = PatchAutoencoder(patch_size=8, latent_dim=4, base_channels=2, dense_width=8,
                              max_epochs=1, seed=seed).fit(patches)
    src_ae = PatchAutoencoder(patch_size=8, latent_dim=3, base_channels=2, dense_width=8,
                              max_epochs=1, seed=seed + 1).fit(patches)
    flux = FluxAutoencoder(d_sol=4, d_cond=3, hidden=16, bottleneck=5, max_epochs=1,
                           seed=seed).fit(rng.standard_normal((200, 35)))
    flux.net_.set_flat(flux.net_.get_flat() * weight_scale)
    norm = Normalizer.fit(rng.uniform(size=(4, 16, 16)))
    grid = GridSpec(16, 16)
    return LatentModel(sol_ae, (src_ae,), flux, norm, (norm,), (grid.hx, grid.hy)), grid


@pytest.fixture(scope="session")
def tiny_model():
    return make_tiny_model()
