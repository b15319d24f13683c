import numpy as np
import pytest

from splitrelay.nn import init_segment


def fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` at array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_segment():
    return init_segment([4, 5, 3], seed=11)


class DeskRun:
    """One default-config run shared across tests; copy segments before mutating."""

    def __init__(self):
        from splitrelay.harness import load_config, prepare
        from splitrelay.pipeline import run_training
        from splitrelay.watermark import derive_nonces, embed_chain

        self.cfg = load_config()
        self.prep = prepare(self.cfg)
        self.plan = self.prep.plan
        self.training = run_training(self.plan, self.prep.cache, self.prep.expanded.labels)
        self.pre_embed = [s.copy() for s in self.training.segments]
        self.nonces = derive_nonces(self.plan.seeds.nonces, self.plan.n)
        self.identities = [self.plan.identity(i) for i in range(1, self.plan.n + 1)]
        self.segments = [s.copy() for s in self.training.segments]
        self.embeds = embed_chain(self.segments, self.prep.cache, self.prep.expanded.labels, self.nonces,
                                  self.identities, self.plan.wm, self.plan.batch_size, self.plan.seeds.batches)

    def fresh(self):
        return [s.copy() for s in self.segments]


_DESK = None


@pytest.fixture(scope="session")
def desk():
    global _DESK
    if _DESK is None:
        _DESK = DeskRun()
    return _DESK


_CRITERIA = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        note = self.detail
        if not ok:
            reason = f"{exc_type.__name__}: {exc}".splitlines()[0]
            note = f"{note}; {reason}" if note else reason
        _CRITERIA[self.number] = (ok, self.title, note)
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records PASS/FAIL for the acceptance summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, note = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}  [{note}]")
