"""Central finite-difference checks of every differentiable op and of the tiny model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ComputationRecord, ConvSpec, NormState, Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# Steps tried for the composed model, keeping the best agreement per tensor.
# With thousands of ReLU inputs a 1e-5 central difference can straddle a kink,
# while for tensors with tiny gradients a 1e-7 difference is dominated by
# float64 round-off in the loss; no single step suits every tensor.  A wrong
# backward pass disagrees at every step, so the minimum stays a sound test.
MODEL_STEPS = (1e-5, 1e-6, 1e-7)


# Gradients that vanish by construction (a conv bias ahead of train-mode
# batch-norm) come out as ~1e-17 analytically and as pure loss round-off
# (~1e-11 at a 1e-5 step) numerically.  Below this norm the comparison is
# absolute: agreement to 1e-10 passes.
NORM_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||, NORM_FLOOR)``."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f: Callable[[], float], t: Tensor, step: float = STEP) -> np.ndarray:
    out = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return out


def check(build: Callable[[], Tensor], inputs: Sequence[Tensor], step=STEP) -> dict:
    """Relative error per input between backward and central differences of the scalar ``build()``.

    ``step`` may be a sequence of steps; each input then reports its smallest error.
    """
    steps = tuple(step) if isinstance(step, (tuple, list)) else (step,)
    with ComputationRecord() as rec:
        loss = build()
    T.backward(rec, loss, inputs)
    analytic = [t.grad.copy() for t in inputs]
    f = lambda: build().item()
    return {t.name or f"input{i}": min(relative_error(a, numeric_grad(f, t, h)) for h in steps)
            for i, (t, a) in enumerate(zip(inputs, analytic))}


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _readout(y: Tensor, weights: np.ndarray) -> Tensor:
    # fixed random projection so no gradient is trivially constant
    return (y * weights).sum()


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    leaf = lambda shape, name: Tensor(rng.standard_normal(shape), requires_grad=True, name=name)
    results = []

    def run(name, build, inputs):
        errs = check(build, inputs)
        results.append(CheckResult(name, max(errs.values())))

    x = leaf((2, 3, 5, 6), "x")
    for stride in (1, 2):
        spec = ConvSpec(3, 4, stride)
        w, b = leaf((4, 3, 3, 3), "w"), leaf((4,), "b")
        proj = rng.standard_normal((2, 4, spec.out_length(5), spec.out_length(6)))
        run(f"conv2d_stride{stride}", lambda: _readout(T.conv2d(x, spec, w, b), proj), [x, w, b])
    spec1 = ConvSpec(3, 4, 2, kernel=1, padding=0)
    w1 = leaf((4, 3, 1, 1), "w1")
    proj1 = rng.standard_normal((2, 4, 3, 3))
    run("conv2d_1x1_stride2", lambda: _readout(T.conv2d(x, spec1, w1), proj1), [x, w1])

    a, wa, ba = leaf((3, 4, 5), "a"), leaf((2, 5), "wa"), leaf((2,), "ba")
    pa = rng.standard_normal((3, 4, 2))
    run("affine", lambda: _readout(T.affine(a, wa, ba), pa), [a, wa, ba])

    e = leaf((4, 5), "e")
    pe = rng.standard_normal((4, 5))
    for kind in ("tanh", "sigmoid", "relu"):
        run(kind, lambda kind=kind: _readout(T.elementwise(e, kind), pe), [e])
    run("softmax", lambda: _readout(T.softmax(e, axis=-1), pe), [e])
    run("log_softmax", lambda: _readout(T.log_softmax(e, axis=-1), pe), [e])

    bx = leaf((4, 2, 3, 2), "bx")
    gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True, name="gamma")
    beta = leaf((2,), "beta")
    state = NormState.fresh(2)
    pb = rng.standard_normal((4, 2, 3, 2))
    run("batch_norm_train",
        lambda: _readout(T.batch_norm(bx, gamma, beta, state, "train", update_stats=False), pb),
        [bx, gamma, beta])
    state.running_mean.data[:] = rng.standard_normal(2)
    state.running_var.data[:] = rng.uniform(0.5, 2.0, 2)
    run("batch_norm_infer", lambda: _readout(T.batch_norm(bx, gamma, beta, state, "infer"), pb),
        [bx, gamma, beta])

    s1, s2 = leaf((3, 4), "s1"), leaf((3, 4), "s2")
    ps = rng.standard_normal((2, 3, 4))
    run("mul_add_sub", lambda: ((s1 * s2 + s1 - s2) * ps[0]).sum(), [s1, s2])
    run("concat_stack", lambda: _readout(T.stack([T.concat([s1, s2], axis=1)[:, 2:6], s2], axis=0), ps),
        [s1, s2])
    run("mean_transpose_reshape",
        lambda: _readout(T.mean(T.transpose(s1, (1, 0)).reshape(2, 2, 3), axis=1), ps[0, :2, :3]), [s1])
    return results


def model_checks(seed: int = 0, length: int = 16, step=MODEL_STEPS) -> list[CheckResult]:
    """Finite differences through the whole tiny preset, for each parameter tensor.

    The SAP context vector is redrawn at unit scale: at its small initial
    scale attention is nearly uniform and the attention parameters barely
    move the loss, leaving their gradients at finite-difference noise level.
    """
    from .heads import forward_logits
    from .model import init_parameters, preset
    from .trainer import cross_entropy

    rng = np.random.default_rng(seed)
    results = []
    for head in ("sap", "tap"):
        cfg = preset("tiny", head=head, num_classes=3)
        params = init_parameters(cfg, seed=seed)
        if head == "sap":
            params["sap.context"].data[...] = rng.standard_normal(params["sap.context"].data.shape)
        feats = Tensor(rng.standard_normal((2, cfg.input_dim, length)), requires_grad=True, name="features")
        labels = np.array([0, 2])

        def build():
            logits, _ = forward_logits(feats, params, mode="train", update_stats=False)
            return cross_entropy(logits, labels)

        inputs = params.trainable() + [feats]
        errs = check(build, inputs, step)
        worst = max(errs, key=errs.get)
        results.append(CheckResult(f"model_{head} (worst: {worst})", errs[worst]))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + model_checks(seed)
