import numpy as np
import pytest

from dualpipe import tensor as T
from dualpipe.gradcheck import FD_STEP, grad_check
from dualpipe.tensor import Tensor


def test_square_at_three():
    w = T.parameter(np.array([3.0], dtype=np.float64))

    def f():
        return T.tsum(T.square(w))

    w.zero_grad()
    loss = f()
    loss.backward()
    analytic = float(w.grad[0])
    fd = (float((3.0 + FD_STEP) ** 2) - float((3.0 - FD_STEP) ** 2)) / (2 * FD_STEP)
    assert analytic == pytest.approx(6.0, abs=1e-12)
    assert abs(analytic - fd) < 1e-8

    rep = grad_check(f, {"w": w}, tol=1e-8)
    assert rep.passed


def test_single_lora_plus_squared_loss():
    from dualpipe.extension import LoraAdapter
    rng = np.random.Generator(np.random.Philox(7))
    w = Tensor(rng.standard_normal((5, 4)))
    a = T.parameter(rng.standard_normal((5, 2)) * 0.5, dtype=np.float64)
    b = T.parameter(rng.standard_normal((2, 4)) * 0.5, dtype=np.float64)
    x = Tensor(rng.standard_normal((3, 5)))
    ad = LoraAdapter(a=a, b=b, rank=2, alpha=4.0)

    def f():
        return T.tsum(T.square(T.lora_linear(x, w, ad)))

    rep = grad_check(f, {"a": a, "b": b}, tol=1e-4)
    assert rep.passed, rep.summary()


def test_full_extension_loss_gradients_match_fd():
    from dualpipe.fdsuite import build_tiny_extension_f64
    from dualpipe.extension import secondary_teacher_forced_loss
    from dualpipe.tokenizer import lang_token
    model = build_tiny_extension_f64()
    rng = np.random.Generator(np.random.Philox(77))
    feats = rng.standard_normal((5, 3))
    v = model.sec_vocab
    target = ([v.special(lang_token("n"))] + v.encode("cd dc") + [v.special("<|eot|>")])

    def f():
        return secondary_teacher_forced_loss(model, feats, target)

    rep = grad_check(f, model.trainable_params(), tol=1e-4, max_elems_per_param=24)
    assert rep.passed, rep.summary()
    assert set(rep.per_param) == set(model.trainable_params())


def test_requires_float64():
    w = T.parameter(np.array([1.0], dtype=np.float32))
    with pytest.raises(ValueError, match="float64"):
        grad_check(lambda: T.tsum(w), {"w": w})


def test_nonfinite_objective_rejected():
    w = T.parameter(np.array([0.0], dtype=np.float64))

    def f():
        return T.log(w)

    with pytest.raises(T.NonFiniteError):
        grad_check(f, {"w": w})
