import numpy as np
import pytest

from oracles import gradcheck
from sheafrec.autodiff import ArrayBackend, Tape, UnsupportedOperationError

FD_TOL = 1e-4


def _away_from_zero(rng, shape, margin=0.25):
    """Random values with |x| > margin, so kinked activations stay smooth."""
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


def _spd_blocks(rng, batch, d):
    a = rng.normal(size=(batch, d, d))
    return a @ np.swapaxes(a, -1, -2) + 2.0 * np.eye(d)


def _primitive_cases(rng):
    """(name, builder, arrays) triples covering every primitive."""
    cases = []

    for ta in (False, True):
        for tb in (False, True):
            a = rng.normal(size=(4, 3) if not ta else (3, 4))
            b = rng.normal(size=(3, 5) if not tb else (5, 3))
            proj = rng.normal(size=(4, 5))
            cases.append((
                f"matmul2d_ta{ta}_tb{tb}",
                lambda t, ts, ta=ta, tb=tb, proj=proj: t.sum(
                    t.mul(t.matmul(ts[0], ts[1], transpose_a=ta, transpose_b=tb), t.tensor(proj))),
                [a, b],
            ))
    a3 = rng.normal(size=(2, 3, 4))
    b3 = rng.normal(size=(2, 4, 2))
    proj3 = rng.normal(size=(2, 3, 2))
    cases.append((
        "matmul3d",
        lambda t, ts: t.sum(t.mul(t.matmul(ts[0], ts[1]), t.tensor(proj3))),
        [a3, b3],
    ))

    x = rng.normal(size=(4, 3))
    y = rng.normal(size=(4, 3))
    bias = rng.normal(size=(3,))
    cases.append(("add", lambda t, ts: t.sum(t.square(t.add(ts[0], ts[1]))), [x, y.copy()]))
    cases.append(("add_bias", lambda t, ts: t.sum(t.square(t.add(ts[0], ts[1]))), [x.copy(), bias]))
    cases.append(("sub", lambda t, ts: t.sum(t.square(t.sub(ts[0], ts[1]))), [x.copy(), y.copy()]))
    cases.append(("mul", lambda t, ts: t.sum(t.mul(ts[0], ts[1])), [x.copy(), y.copy()]))
    cases.append(("scale_const", lambda t, ts: t.sum(t.square(t.scale(ts[0], -2.5))), [x.copy()]))
    s = np.array([[0.7]])
    cases.append(("scale_tensor", lambda t, ts: t.sum(t.square(t.scale(ts[0], ts[1]))), [x.copy(), s]))

    idx = np.array([0, 2, 2, 1, 3])
    cases.append(("block_gather", lambda t, ts: t.sum(t.square(t.gather(ts[0], idx))), [x.copy()]))
    v = rng.normal(size=(5, 2))
    proj_sc = rng.normal(size=(3, 2))
    cases.append((
        "block_scatter",
        lambda t, ts: t.sum(t.mul(t.scatter_add(ts[0], np.array([0, 1, 1, 2, 0]), 3), t.tensor(proj_sc))),
        [v],
    ))

    for name in ("elu", "relu", "tanh", "identity"):
        z = _away_from_zero(rng, (4, 3))
        cases.append((name, lambda t, ts, name=name: t.sum(t.square(t.activation(name, ts[0]))), [z]))

    pos = np.abs(rng.normal(size=(5,))) + 0.5
    cases.append(("log", lambda t, ts: t.sum(t.log(ts[0])), [pos.copy()]))
    cases.append(("sqrt", lambda t, ts: t.sum(t.sqrt(ts[0])), [pos.copy()]))
    z = rng.normal(size=(6,))
    cases.append(("sigmoid", lambda t, ts: t.sum(t.sigmoid(ts[0])), [z.copy()]))
    cases.append(("softplus", lambda t, ts: t.sum(t.softplus(ts[0])), [z.copy()]))
    cases.append(("square", lambda t, ts: t.sum(t.square(ts[0])), [z.copy()]))

    m = rng.normal(size=(3, 4))
    proj_row = rng.normal(size=(3,))
    cases.append(("sum_all", lambda t, ts: t.sum(ts[0]), [m.copy()]))
    cases.append((
        "sum_axis",
        lambda t, ts: t.sum(t.mul(t.sum(ts[0], axis=1), t.tensor(proj_row))),
        [m.copy()],
    ))
    cases.append(("mean_all", lambda t, ts: t.mean(ts[0]), [m.copy()]))
    proj_col = rng.normal(size=(4,))
    cases.append((
        "mean_axis",
        lambda t, ts: t.sum(t.mul(t.mean(ts[0], axis=0), t.tensor(proj_col))),
        [m.copy()],
    ))

    p1 = rng.normal(size=(2, 3))
    p2 = rng.normal(size=(4, 3))
    cases.append(("concat_rows", lambda t, ts: t.sum(t.square(t.concat([ts[0], ts[1]], axis=0))), [p1, p2]))
    q1 = rng.normal(size=(3, 2))
    q2 = rng.normal(size=(3, 5))
    cases.append(("concat_cols", lambda t, ts: t.sum(t.square(t.concat([ts[0], ts[1]], axis=1))), [q1, q2]))

    r = rng.normal(size=(6, 2))
    cases.append(("reshape", lambda t, ts: t.sum(t.square(t.reshape(ts[0], (3, 4)))), [r]))

    blocks = rng.normal(size=(5, 2, 3))
    dense = rng.normal(size=(4, 3, 2))
    ridx = np.array([0, 1, 2, 0, 1])
    cidx = np.array([1, 0, 3, 2, 1])
    proj_b = rng.normal(size=(3, 2, 2))
    cases.append((
        "sparse_block_apply",
        lambda t, ts: t.sum(t.mul(t.sparse_block_apply(ts[0], ts[1], ridx, cidx, 3), t.tensor(proj_b))),
        [blocks, dense],
    ))

    spd = _spd_blocks(rng, 3, 3)
    proj_spd = rng.normal(size=(3, 3, 3))
    cases.append((
        "sym_inv_sqrt",
        lambda t, ts: t.sum(t.mul(t.sym_inv_sqrt(ts[0], eps=0.05), t.tensor(proj_spd))),
        [spd],
    ))
    return cases


def test_every_primitive_matches_finite_differences():
    worst_by_name = {}
    for instance in range(10):
        rng = np.random.default_rng(1000 + instance)
        for name, build, arrays in _primitive_cases(rng):
            err = gradcheck(build, arrays)
            worst_by_name[name] = max(worst_by_name.get(name, 0.0), err)
    failures = {k: v for k, v in worst_by_name.items() if v >= FD_TOL}
    assert not failures, f"finite-difference mismatches: {failures}"


class TestShapeRules:
    def test_matmul_shape_rule(self):
        t = Tape()
        out = t.matmul(t.tensor(np.zeros((2, 3))), t.tensor(np.zeros((3, 4))))
        assert out.shape == (2, 4)

    def test_add_mismatch_is_an_error(self):
        t = Tape()
        with pytest.raises(ValueError, match="add"):
            t.add(t.tensor(np.zeros((2, 3))), t.tensor(np.zeros((3, 4))))

    def test_matmul_inner_mismatch_lists_shapes(self):
        t = Tape()
        with pytest.raises(ValueError, match=r"\(2, 3\)"):
            t.matmul(t.tensor(np.zeros((2, 3))), t.tensor(np.zeros((4, 2))))

    def test_sigmoid_at_zero(self):
        t = Tape()
        assert t.sigmoid(t.tensor(np.zeros(1))).value[0] == 0.5


class TestRecordDispatch:
    def test_known_tags(self):
        t = Tape()
        a = t.tensor(np.ones((2, 2)), requires_grad=True)
        out = t.record("matmul", a, t.tensor(np.eye(2)))
        assert np.array_equal(out.value, np.ones((2, 2)))
        act = t.record("elu", a)
        assert np.array_equal(act.value, np.ones((2, 2)))
        gathered = t.record("block-gather", a, np.array([1, 0]))
        assert gathered.shape == (2, 2)

    def test_unknown_tag_is_rejected(self):
        t = Tape()
        with pytest.raises(UnsupportedOperationError, match="conv2d"):
            t.record("conv2d", t.tensor(np.ones(2)))


class TestBackwardContract:
    def test_sum_gradient_is_all_ones(self, rng):
        t = Tape()
        x = t.tensor(rng.normal(size=(3, 5)), requires_grad=True)
        grads = t.backward(t.sum(x))
        assert np.array_equal(grads[x], np.ones((3, 5)))

    def test_least_squares_gradient_matches_analytic_form(self, rng):
        a = rng.normal(size=(4, 3))
        x = rng.normal(size=(3, 1))
        b = rng.normal(size=(4, 1))
        t = Tape()
        at = t.tensor(a, requires_grad=True)
        residual = t.sub(t.matmul(at, t.tensor(x)), t.tensor(b))
        grads = t.backward(t.sum(t.square(residual)))
        analytic = 2.0 * (a @ x - b) @ x.T
        assert np.abs(grads[at] - analytic).max() < 1e-10

    def test_non_scalar_loss_rejected(self, rng):
        t = Tape()
        x = t.tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            t.backward(t.square(x))

    def test_unreachable_parameter_gets_zero_gradient(self, rng):
        t = Tape()
        x = t.tensor(rng.normal(size=(3,)), requires_grad=True)
        unused = t.tensor(rng.normal(size=(2, 2)), requires_grad=True)
        grads = t.backward(t.sum(x))
        assert unused not in grads
        assert np.array_equal(grads[unused], np.zeros((2, 2)))

    def test_fan_out_accumulates(self, rng):
        x0 = rng.normal(size=(4,))
        t = Tape()
        x = t.tensor(x0, requires_grad=True)
        loss = t.sum(t.add(t.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
        grads = t.backward(loss)
        assert np.abs(grads[x] - (2 * x0 + 1)).max() < 1e-12

    def test_linearity_of_gradients(self, rng):
        x0 = rng.normal(size=(5,))
        a, b = 2.5, -1.25

        def grad_of(build):
            t = Tape()
            x = t.tensor(x0, requires_grad=True)
            return t.backward(build(t, x))[x]

        gf = grad_of(lambda t, x: t.sum(t.square(x)))
        gg = grad_of(lambda t, x: t.sum(t.softplus(x)))
        combined = grad_of(
            lambda t, x: t.add(t.scale(t.sum(t.square(x)), a), t.scale(t.sum(t.softplus(x)), b))
        )
        assert np.abs(combined - (a * gf + b * gg)).max() < 1e-10

    def test_identical_replays_are_bitwise_identical(self, rng):
        x0 = rng.normal(size=(6, 4))
        w0 = rng.normal(size=(4, 3))

        def run():
            t = Tape()
            x = t.tensor(x0, requires_grad=True)
            w = t.tensor(w0, requires_grad=True)
            loss = t.mean(t.softplus(t.matmul(x, w)))
            g = t.backward(loss)
            return g[x], g[w]

        g1 = run()
        g2 = run()
        assert np.array_equal(g1[0], g2[0])
        assert np.array_equal(g1[1], g2[1])

    def test_intermediate_gradient_available(self, rng):
        t = Tape()
        x = t.tensor(rng.normal(size=(3,)), requires_grad=True)
        y = t.scale(x, 3.0)
        grads = t.backward(t.sum(y))
        assert np.array_equal(grads[y], np.ones(3))
        assert np.array_equal(grads[x], np.full(3, 3.0))


class TestArrayBackendParity:
    def test_backends_compute_identical_values(self, rng):
        np_ops = ArrayBackend()
        tape = Tape()
        x0 = rng.normal(size=(5, 4))
        w0 = rng.normal(size=(4, 4))

        def pipeline(ops, x, w):
            h = ops.activation("tanh", ops.matmul(x, w))
            g = ops.gather(h, np.array([0, 0, 3]))
            s = ops.scatter_add(g, np.array([1, 0, 1]), 2)
            return ops.value(ops.mean(ops.softplus(s)))

        plain = pipeline(np_ops, np_ops.tensor(x0), np_ops.tensor(w0))
        recorded = pipeline(tape, tape.tensor(x0), tape.tensor(w0))
        assert np.array_equal(plain, recorded)

    def test_backend_sym_inv_sqrt_matches_tape(self, rng):
        blocks = _spd_blocks(rng, 4, 3)
        np_ops = ArrayBackend()
        tape = Tape()
        a = np_ops.sym_inv_sqrt(np_ops.tensor(blocks), eps=1e-6)
        b = tape.sym_inv_sqrt(tape.tensor(blocks), eps=1e-6).value
        assert np.array_equal(a, b)
