import numpy as np
import pytest

from qgnntrack.events import Event, Hit, Particle, SynthConfig, synth_event
from qgnntrack.graphs import build_graph, select_hits


def make_event(tracks, event_id=0):
    """Event from ``[(pid, vertex, momentum, [(r, phi, z, volume, layer), ...]), ...]``."""
    hits, particles, hid = [], [], 1
    for pid, vertex, momentum, points in tracks:
        particles.append(Particle(pid, vertex, momentum, 1))
        for r, phi, z, vol, lay in points:
            hits.append(Hit(hid, r, phi, z, vol, lay, pid))
            hid += 1
    return Event(event_id, tuple(hits), tuple(particles), len({p.vertex for p in particles}))


def central_diff(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_graph():
    """A ten-node graph from the synthetic generator, used by the end-to-end gradient checks."""
    # two tracks on the five innermost layers of a narrow sector give true and fake doublets
    for seed in range(200):
        ev = synth_event(SynthConfig(seed=seed, phi_range=(-0.02, 0.02), tracks_per_vertex=(2, 2)), 1)
        hits = [h for h in select_hits(ev) if h.layer_index < 5]
        g = build_graph(hits)
        if g.n_nodes == 10 and g.n_edges >= 6 and 0 < g.y.sum() < g.n_edges:
            return g
    raise RuntimeError("no suitable ten-node graph found")


def model_gradient_errors(graph, params, loss_fn, eps=1e-5, max_entries=None, rng=None):
    """Relative errors ``|a - fd| / max(|a|, 1e-8)`` of a model's parameter gradient.

    ``max_entries`` caps the entries probed per tensor (sampled with ``rng``).
    Returns ``(plain, refined, inert)``. ``plain`` uses the central difference with
    step ``eps``; ``refined`` combines steps ``eps`` and ``eps / 2`` (Richardson) to
    cancel the O(eps**2) truncation term. entries whose loss moves by at most 1e-12 under a unit shift of the
    parameter have a true derivative of zero; ``inert`` holds their ``|a|`` and they are
    kept out of ``errors``, since there both sides are pure rounding noise.
    """
    from qgnntrack import autodiff as ad
    from qgnntrack.model import gnn_forward

    def f():
        return float(loss_fn(gnn_forward(graph, params), graph.y).value)

    def shifted(t, idx, h):
        old = t.value[idx]
        t.value[idx] = old + h
        fp = f()
        t.value[idx] = old - h
        fm = f()
        t.value[idx] = old
        return fp, fm

    params.zero_grad()
    ad.backward(loss_fn(gnn_forward(graph, params), graph.y))
    grads = {k: t.grad.copy() for k, t in params.tensors.items()}
    base = f()
    plain, refined, inert = [], [], []
    for key, t in params.tensors.items():
        idxs = list(np.ndindex(t.shape))
        if max_entries is not None and len(idxs) > max_entries:
            idxs = [idxs[i] for i in rng.choice(len(idxs), max_entries, replace=False)]
        for idx in idxs:
            a = grads[key][idx]
            if abs(a) < 1e-12 and all(abs(v - base) <= 1e-12 for v in shifted(t, idx, 1.0)):
                inert.append(abs(a))
                continue
            fp, fm = shifted(t, idx, eps)
            fd = (fp - fm) / (2 * eps)
            fp2, fm2 = shifted(t, idx, eps / 2)
            fd2 = (4 * (fp2 - fm2) / eps - fd) / 3
            plain.append(abs(a - fd) / max(abs(a), 1e-8))
            refined.append(abs(a - fd2) / max(abs(a), 1e-8))
    return np.array(plain), np.array(refined), np.array(inert)


# one line per acceptance criterion, shown after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
