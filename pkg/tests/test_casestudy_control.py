import csv
import math

import numpy as np
import pytest

from immersion_coding.casestudy_control import (REACTOR_DIMS, ControllerState, ReactorParams,
                                                ReactorState, controller_algorithm,
                                                controller_step, controller_terms, delayed_index,
                                                export_figures_data, reactor_step,
                                                run_closed_loop)
from immersion_coding.errors import ControllerDomainError, NumericError
from immersion_coding.protocol import CloudService, SocketTransport, start_server
from immersion_coding.scheme import keygen_preset


@pytest.fixture(scope="module")
def loops():
    scheme = keygen_preset(REACTOR_DIMS, "balanced", seed=0)
    plain = run_closed_loop(steps=100)
    enc = run_closed_loop(steps=100, mode="encoded", scheme=scheme,
                          service=CloudService(scheme.target_keys()))
    return scheme, plain, enc


def test_fixed_point_at_zero():
    p = ReactorParams(vartheta=(0.0, 0.0, 0.0), x0=(0.0, 0.0))
    s = ReactorState.initial(p)
    for k in range(20):
        s, y = reactor_step(s, p, 0.0, k)
    assert s.x1 == 0.0 and s.x2 == 0.0


def test_one_step_hand_evaluation():
    p = ReactorParams()
    s, y = reactor_step(ReactorState.initial(p), p, 0.0, 0)
    # F1 = -(0.5 + 0.3)(-0.5) + (0.5 / 0.5) 2 = 2.4 ; F2 = 0.4 - 0.5 - 2 = -2.1
    assert s.x1 == pytest.approx(-0.5 + 0.1 * 2.4, abs=1e-15)
    assert s.x2 == pytest.approx(2.0 - 0.1 * 2.1, abs=1e-15)
    assert y == s.x1
    lit = ReactorParams(dt=None)
    s, _ = reactor_step(ReactorState.initial(lit), lit, 1.0, 0)
    assert (s.x1, s.x2) == pytest.approx((2.4, -1.1), abs=1e-15)


def test_delay_term_uses_history():
    p = ReactorParams(dt=None)
    s = ReactorState(1.0, 0.0, [3.0, 2.0, 1.0], 2)
    k = 2
    tau = delayed_index(p, k)
    assert tau == max(0, round(k - 0.5 * (3 + math.sin(k))))
    s2, _ = reactor_step(s, p, 0.0, k)
    xt = s.history[tau]
    expect = -(0.5 + 0.3) * 1.0 + 0.0 + math.sin(k) * xt ** 2
    assert s2.x1 == pytest.approx(expect, abs=1e-14)


@pytest.mark.parametrize("dt", [0.1, 0.05, None])
def test_delay_causality(dt):
    p = ReactorParams(dt=dt)
    for k in range(2000):
        assert 0 <= delayed_index(p, k) < max(k, 1)


def test_controller_rho_at_zero():
    assert controller_terms(0.0, 1.0, 1.0, 0.0).rho == pytest.approx(1.02, abs=1e-15)


def test_controller_one_step_oracle():
    z, r, l, y = 0.0, 1.0, 1.0, -0.5
    rho = (0.1 + y ** 2) ** 2 + 1.01
    za = r ** -0.5 * (z + r * y + l * rho * y)
    d1 = 2 * (2 * l ** 2 + l ** 4 * (1.02 + 0.2 * y ** 2 + y ** 4))
    d2 = 1.0404 + 1.224 * y ** 2 + 10.56 * y ** 4 + 6 * y ** 6 + 25 * y ** 8
    delta = d1 * d2 + 4 * y ** 4 * (1.02 + 0.2 * y ** 2 + y ** 4) ** 4
    m = max(r * delta - r ** 2, rho * y ** 2 + za ** 2)
    u = -r * (z + r * y + l * rho * y)
    t = controller_terms(z, r, l, y)
    assert (t.rho, t.zeta_aux, t.delta, t.m, t.u) == pytest.approx((rho, za, delta, m, u),
                                                                     rel=1e-14)
    nxt, u2 = controller_step(ControllerState(), y, 0, dt=None)
    assert u2 == pytest.approx(u, rel=1e-15)
    assert nxt.z_hat == pytest.approx(u - r * z - r * r * y - m * y, rel=1e-14)
    assert nxt.r == pytest.approx(m, rel=1e-14)
    assert nxt.l == pytest.approx(rho * y * y, rel=1e-14)
    e, _ = controller_step(ControllerState(), y, 0, dt=0.1)
    assert e.r == pytest.approx(1.0 + 0.1 * m, rel=1e-14)


def test_controller_domain():
    with pytest.raises(ControllerDomainError, match="step 7"):
        controller_step(ControllerState(0.0, 0.0, 1.0), 0.1, 7)


def test_controller_algorithm_matches_step():
    alg = controller_algorithm()
    cs = ControllerState(0.2, 1.5, 0.7)
    nxt, u = controller_step(cs, 0.3)
    assert np.allclose(alg.f(cs.as_vector(), np.array([0.3]), None), nxt.as_vector(), rtol=0)
    assert alg.g(cs.as_vector(), np.array([0.3]), None)[0] == u


def test_literal_mode_aborts_informatively():
    with pytest.raises(NumericError, match="step"):
        run_closed_loop(ReactorParams(dt=None), steps=100)


def test_plain_loop_stabilizes(loops):
    _, plain, _ = loops
    assert np.abs(plain.x).max() <= 10
    assert np.abs(plain.x[-1]).max() < 1e-2 * np.abs(plain.x[0]).max()
    assert np.all(plain.zeta[:, 1] > 0)


def test_encoded_matches_plain(loops):
    _, plain, enc = loops
    assert np.abs(plain.u - enc.u).max() <= 1e-6
    assert np.abs(plain.x - enc.x).max() <= 1e-6


def test_encoded_dimensions(loops):
    _, _, enc = loops
    assert enc.ytilde.shape == (100, 3)
    assert enc.utilde.shape == (100, 3)
    assert enc.zeta_tilde.shape == (101, 4)


def test_controller_immersion_residual(loops):
    _, _, enc = loops
    assert enc.residuals[0] == 0.0
    bound = 1e-8 * (1 + np.abs(enc.zeta_tilde).max(axis=1))
    assert np.all(enc.residuals <= bound)


def test_export(loops, tmp_path):
    _, plain, enc = loops
    ratio = export_figures_data(plain, enc, tmp_path)
    assert ratio > 0
    with open(tmp_path / "trajectory.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 100
    assert list(rows[0])[:7] == ["step", "x1", "x2", "y", "ytilde_0", "ytilde_1", "ytilde_2"]
    for r in rows:
        assert float(r["err"]) == abs(float(r["u"]) - float(r["u_hat"]))
    t = [float(r["t_encoded_s"]) for r in rows]
    assert t == sorted(t)
    with open(tmp_path / "states.csv") as fh:
        assert len(list(csv.reader(fh))) == 102


def test_loop_over_socket_matches_loopback(loops):
    scheme, _, enc = loops
    server = start_server(CloudService(scheme.target_keys()))
    try:
        host, port = server.server_address[:2]
        sock = run_closed_loop(steps=100, mode="encoded", scheme=scheme,
                               transport=SocketTransport(host, port))
    finally:
        server.shutdown()
        server.server_close()
    assert np.array_equal(sock.u, enc.u)
    assert sock.residuals is None
