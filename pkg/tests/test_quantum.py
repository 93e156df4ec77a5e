import math

import numpy as np
import pytest

from qgnntrack import autodiff as ad
from qgnntrack.quantum import (
    CircuitSpec, Gate, PQCLayer, StateVector, amplitude_encode, angle_encode, apply_gate, circuit_matrix,
    inverse_gates, parallel_encode, pqc_forward, pqc_grad_exact, pqc_grad_parameter_shift, pqc_node,
    readout_probs, readout_z, ring_pairs, run_gates, run_pqc,
)

SQ2 = 1 / math.sqrt(2)


def random_state(rng, n, batch=()):
    v = rng.normal(size=batch + (2 ** n,)) + 1j * rng.normal(size=batch + (2 ** n,))
    return StateVector(n, v / np.linalg.norm(v, axis=-1, keepdims=True))


def dense_unitary(n, gates):
    return run_gates(StateVector(n, np.eye(2 ** n, dtype=complex)), gates).amplitudes.T


class TestEncodings:
    def test_angle_zero(self):
        assert np.allclose(angle_encode(np.zeros(3)).amplitudes, np.eye(8)[0])

    def test_angle_pi(self):
        assert np.allclose(angle_encode([math.pi]).amplitudes, [0, 1], atol=1e-16)

    def test_angle_closed_form(self):
        s = angle_encode([math.pi / 2, 0.0])
        assert np.allclose(s.amplitudes, [SQ2, 0, SQ2, 0])
        assert np.allclose(s.probabilities(), [0.5, 0, 0.5, 0])

    def test_angle_non_finite(self):
        with pytest.raises(ValueError):
            angle_encode([0.1, np.inf])

    def test_amplitude_basis(self):
        s = amplitude_encode(np.eye(64)[5])
        assert s.n_qubits == 6 and readout_probs(s)[5] == 1.0

    def test_amplitude_uniform(self):
        assert np.allclose(readout_probs(amplitude_encode(np.ones(64))), 1 / 64)

    def test_amplitude_normalizes(self):
        assert np.allclose(amplitude_encode([3.0, 4.0, 0.0, 0.0]).amplitudes, [0.6, 0.8, 0, 0])

    def test_amplitude_degenerate(self):
        s = amplitude_encode(np.array([[0.0] * 4, [1e-13, 0, 0, 0], [1.0, 0, 0, 0]]))
        assert s.degenerate.tolist() == [True, True, False]
        assert np.array_equal(s.amplitudes[0], [1, 0, 0, 0])

    @pytest.mark.parametrize("length", [3, 6, 1])
    def test_amplitude_bad_length(self, length):
        with pytest.raises(ValueError):
            amplitude_encode(np.ones(length))

    def test_parallel_basis_and_uniform(self):
        assert parallel_encode(np.eye(64)[0]).amplitudes[0] == 1.0
        assert np.allclose(readout_probs(parallel_encode(np.ones(64))), 1 / 4096)

    def test_parallel_tensor_square(self, rng):
        v = rng.normal(size=64)
        u = v / np.linalg.norm(v)
        amps = parallel_encode(v).amplitudes.reshape(64, 64)
        i, j = rng.integers(0, 64, 2)
        assert amps[i, j] == pytest.approx(u[i] * u[j], abs=1e-15)


class TestCircuit:
    def test_theta_count(self):
        assert CircuitSpec(6).n_thetas == 24
        assert CircuitSpec(4, 2).n_thetas == 12

    def test_ring(self):
        assert ring_pairs(1) == ()
        assert ring_pairs(2) == ((0, 1),)
        assert ring_pairs(4) == ((0, 1), (1, 2), (2, 3), (3, 0))

    def test_zero_angles_fix_ground_state(self):
        out = run_pqc(StateVector.zero(5), CircuitSpec(5), np.zeros(20))
        assert np.allclose(out.amplitudes, np.eye(32)[0])

    def test_one_qubit_closed_form(self):
        out = run_pqc(StateVector.zero(1), CircuitSpec(1, 1), [math.pi / 2, 0.0])
        assert np.allclose(out.amplitudes, [SQ2, SQ2])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            run_pqc(StateVector.zero(3), CircuitSpec(4), np.zeros(16))
        with pytest.raises(ValueError):
            CircuitSpec(3).gates(np.zeros(5))

    def test_cz_matches_dense_matrix(self):
        cz = np.diag([1, 1, 1, -1]).astype(complex)
        u = dense_unitary(2, [Gate("cz", (0, 1))])
        assert np.allclose(u, cz)

    @pytest.mark.parametrize("name, q", [("ry", 0), ("ry", 2), ("rx", 1), ("rz", 2)])
    def test_rotation_matches_kron(self, name, q):
        t = 0.73
        c, s = math.cos(t / 2), math.sin(t / 2)
        m = {"ry": [[c, -s], [s, c]], "rx": [[c, -1j * s], [-1j * s, c]],
             "rz": [[np.exp(-0.5j * t), 0], [0, np.exp(0.5j * t)]]}[name]
        mats = [np.eye(2)] * 3
        mats[q] = np.array(m)
        expected = np.kron(np.kron(mats[0], mats[1]), mats[2])
        assert np.allclose(dense_unitary(3, [Gate(name, (q,), None, t)]), expected)

    def test_norm_over_random_sequences(self, rng):
        names = ["ry", "rx", "rz", "cz"]
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 7))
            amps = random_state(rng, n).amplitudes
            for _ in range(int(rng.integers(1, 20))):
                name = names[int(rng.integers(0, 4 if n > 1 else 3))]
                if name == "cz":
                    gate = Gate("cz", tuple(int(q) for q in rng.choice(n, 2, replace=False)))
                else:
                    gate = Gate(name, (int(rng.integers(n)),), None, float(rng.uniform(-7, 7)))
                amps = apply_gate(amps, n, gate)
                worst = max(worst, abs(float(np.sum(np.abs(amps) ** 2)) - 1.0))
        assert worst <= 1e-12

    @pytest.mark.parametrize("n", [1, 2, 4, 6])
    def test_inverse_restores_state(self, n, rng):
        spec = CircuitSpec(n)
        gates = spec.gates(rng.uniform(-math.pi, math.pi, spec.n_thetas))
        psi = random_state(rng, n, (3,))
        back = run_gates(run_gates(psi, gates), inverse_gates(gates))
        assert np.max(np.abs(back.amplitudes - psi.amplitudes)) <= 1e-10

    def test_matrix_path_matches_direct(self, rng):
        layer = PQCLayer("amplitude", CircuitSpec(3))
        th = rng.uniform(-3, 3, 12)
        x = rng.normal(size=(20, 8))
        direct = run_pqc(amplitude_encode(x), layer.circuit, th).amplitudes
        assert np.allclose(amplitude_encode(x).amplitudes @ circuit_matrix(layer.circuit, th), direct, atol=1e-14)
        assert pqc_forward(layer, x, th).matrix is not None
        assert pqc_forward(layer, x[:5], th).matrix is None


class TestReadouts:
    def test_z_values(self):
        assert np.allclose(readout_z(StateVector.zero(3)), [1, 1, 1])
        assert np.allclose(readout_z(angle_encode([0.0, math.pi])), [1, -1])
        assert abs(readout_z(angle_encode([math.pi / 2]))[0]) <= 1e-15

    def test_probs_basis(self):
        assert readout_probs(amplitude_encode(np.eye(8)[5])).tolist() == [0, 0, 0, 0, 0, 1, 0, 0]

    def test_probs_properties(self, rng):
        s = random_state(rng, 5, (4,))
        p = readout_probs(s)
        assert np.all(p >= 0) and np.allclose(p.sum(-1), 1, atol=1e-12)
        coarse = readout_probs(s, (0, 1))
        assert np.allclose(p.reshape(4, 4, 8).sum(-1), coarse, atol=1e-15)
        swapped = readout_probs(s, (3, 1))
        brute = np.zeros((4, 4))
        for k in range(32):
            bits = [(k >> (4 - q)) & 1 for q in range(5)]
            brute[:, 2 * bits[3] + bits[1]] += p[:, k]
        assert np.allclose(swapped, brute, atol=1e-15)

    def test_empty_measurement(self):
        with pytest.raises(ValueError):
            readout_probs(StateVector.zero(2), ())

    def test_parallel_marginal_parity(self, rng):
        for _ in range(5):
            v = rng.normal(size=64)
            twelve = run_pqc(parallel_encode(v), CircuitSpec(12), np.zeros(48))
            assert np.max(np.abs(readout_probs(twelve, range(6)) - readout_probs(amplitude_encode(v)))) <= 1e-12


# --- gradients --------------------------------------------------------------

LAYERS = [
    ("angle", 4, "z"), ("angle", 4, "probs"),
    ("amplitude", 6, "z"), ("amplitude", 6, "probs"),
    ("parallel", 12, "z"), ("parallel", 12, "probs"),
]


def _scalar(layer, x, g):
    return lambda th: float(np.sum(pqc_forward(layer, x, th).outputs * g))


class TestGradients:
    def test_single_qubit_closed_form(self):
        layer = PQCLayer("angle", CircuitSpec(1, 0), "z")
        for t in np.linspace(-3, 3, 7):
            rec = pqc_forward(layer, [[0.0]], [t])
            assert rec.outputs[0, 0] == pytest.approx(math.cos(t), abs=1e-15)
            gt, gx = pqc_grad_exact(rec, [[1.0]])
            assert gt[0] == pytest.approx(-math.sin(t), abs=1e-15)
            assert gx[0, 0] == pytest.approx(-math.sin(t), abs=1e-15)
            ps = pqc_grad_parameter_shift(lambda th: pqc_forward(layer, [[0.0]], th).outputs[0, 0], [t])
            assert ps[0] == pytest.approx(-math.sin(t), abs=1e-15)

    def test_zero_upstream(self, rng):
        layer = PQCLayer("amplitude", CircuitSpec(3))
        rec = pqc_forward(layer, rng.normal(size=(4, 8)), rng.uniform(-3, 3, 12))
        gt, gx = pqc_grad_exact(rec, np.zeros_like(rec.outputs))
        assert not gt.any() and not gx.any()

    def test_constant_circuit_shift(self):
        assert np.all(pqc_grad_parameter_shift(lambda th: 1.0, np.ones(5)) == 0)

    @pytest.mark.parametrize("encoding, n, readout", LAYERS)
    @pytest.mark.parametrize("batch", [2, 80])
    def test_exact_matches_parameter_shift(self, encoding, n, readout, batch, rng):
        if encoding == "parallel" and batch > 2:
            pytest.skip("12-qubit batch kept small")
        layer = PQCLayer(encoding, CircuitSpec(n), readout)
        x = rng.normal(size=(batch, layer.n_features))
        th = rng.uniform(-math.pi, math.pi, layer.circuit.n_thetas)
        rec = pqc_forward(layer, x, th)
        g = rng.normal(size=rec.outputs.shape)
        gt, _ = pqc_grad_exact(rec, g)
        ps = pqc_grad_parameter_shift(_scalar(layer, x, g), th)
        assert np.max(np.abs(gt - ps)) <= 1e-10

    @pytest.mark.parametrize("encoding, n, readout", LAYERS + [("amplitude", 3, "amplitudes")])
    def test_feature_gradient_finite_differences(self, encoding, n, readout, rng):
        layer = PQCLayer(encoding, CircuitSpec(n), readout)
        x = rng.normal(size=(2, layer.n_features))
        th = rng.uniform(-math.pi, math.pi, layer.circuit.n_thetas)
        rec = pqc_forward(layer, x, th)
        g = rng.normal(size=rec.outputs.shape)
        _, gx = pqc_grad_exact(rec, g)
        eps = 1e-6
        cols = range(layer.n_features) if layer.n_features <= 8 else rng.choice(layer.n_features, 8, replace=False)
        for i in range(2):
            for j in cols:
                xp, xm = x.copy(), x.copy()
                xp[i, j] += eps
                xm[i, j] -= eps
                fd = (np.sum(pqc_forward(layer, xp, th).outputs * g) - np.sum(pqc_forward(layer, xm, th).outputs * g)) / (2 * eps)
                assert gx[i, j] == pytest.approx(fd, abs=1e-8)

    def test_amplitude_readout_angles_finite_differences(self, rng):
        # raw amplitudes are not expectation values, so finite differences are the oracle here
        layer = PQCLayer("amplitude", CircuitSpec(3), "amplitudes")
        x = rng.normal(size=(20, 8))
        th = rng.uniform(-3, 3, 12)
        rec = pqc_forward(layer, x, th)
        g = rng.normal(size=rec.outputs.shape)
        gt, _ = pqc_grad_exact(rec, g)
        f = _scalar(layer, x, g)
        fd = np.array([(f(th + e) - f(th - e)) / 2e-6 for e in np.eye(12) * 1e-6])
        assert np.max(np.abs(gt - fd)) <= 1e-8

    def test_parameter_shift_matches_finite_differences(self, rng):
        layer = PQCLayer("amplitude", CircuitSpec(6), "probs")
        x = rng.normal(size=(3, 64))
        th = rng.uniform(-math.pi, math.pi, 24)
        g = rng.normal(size=(3, 64))
        f = _scalar(layer, x, g)
        ps = pqc_grad_parameter_shift(f, th)
        fd = np.array([(f(th + e) - f(th - e)) / 2e-6 for e in np.eye(24) * 1e-6])
        assert np.max(np.abs(ps - fd)) <= 1e-8

    def test_degenerate_sample_has_zero_feature_gradient(self, rng):
        layer = PQCLayer("amplitude", CircuitSpec(2))
        x = np.vstack([np.zeros(4), rng.normal(size=4)])
        rec = pqc_forward(layer, x, rng.uniform(-3, 3, 8))
        _, gx = pqc_grad_exact(rec, np.ones_like(rec.outputs))
        assert rec.degenerate.tolist() == [True, False]
        assert not gx[0].any() and gx[1].any()

    def test_node_backward(self, rng):
        layer = PQCLayer("angle", CircuitSpec(3), "z")
        x = ad.Tensor(rng.normal(size=(4, 3)), True)
        th = ad.Tensor(rng.uniform(-3, 3, 12), True)
        ad.backward(ad.total(pqc_node(layer, x, th)))
        gt, gx = pqc_grad_exact(pqc_forward(layer, x.value, th.value), np.ones((4, 3)))
        assert np.array_equal(th.grad, gt) and np.array_equal(x.grad, gx)


def test_layer_validation():
    with pytest.raises(ValueError):
        PQCLayer("bogus", CircuitSpec(2))
    with pytest.raises(ValueError):
        PQCLayer("parallel", CircuitSpec(5))
    with pytest.raises(ValueError):
        PQCLayer("amplitude", CircuitSpec(2)).encode(np.ones(3))
    with pytest.raises(ValueError):
        StateVector(13, np.zeros(2 ** 13))
