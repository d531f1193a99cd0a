"""Central finite-difference verification of every differentiable primitive.

Checks run in float64 so the 1e-4 relative tolerance is limited by the
O(step^2) truncation error rather than rounding. Inputs for kinked ops
(PReLU, max pooling) are nudged away from their nondifferentiable points.
"""

from __future__ import annotations

import numpy as np

from .blocks import CFPModule, CFPModuleConfig
from .tensor import (
    ConvSpec,
    GradTape,
    Tensor,
    avgpool,
    batch_norm,
    bilinear_upsample,
    conv2d,
    maxpool2x2,
    prelu,
    tensor_sum,
)
from .training import cross_entropy_loss

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-4
MODULE_STEP = 5e-6


def max_rel_error(analytic, numeric):
    """Worst elementwise relative disagreement between two gradients."""
    analytic = np.asarray(analytic, np.float64)
    numeric = np.asarray(numeric, np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _away_from_zero(x, margin=0.05):
    # keep PReLU inputs a safe distance from the kink
    small = np.abs(x) < margin
    return x + np.sign(np.where(x == 0, 1.0, x)) * margin * small


def check_gradients(loss_fn, wrt, step=DEFAULT_STEP, max_coords=None, rng=None):
    """Compare taped gradients of ``loss_fn`` against central differences.

    ``loss_fn(tape)`` must rebuild the computation from the current contents
    of the ``wrt`` tensors on every call. ``wrt`` is a sequence of
    (name, Tensor); when ``max_coords`` is set, at most that many randomly
    chosen coordinates per tensor are probed.
    """
    tape = GradTape()
    loss = loss_fn(tape)
    tape.backward(loss, parameters=[t for _, t in wrt])
    analytic = {name: t.grad.copy() for name, t in wrt}
    worst = 0.0
    for name, tensor in wrt:
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            indices = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(indices.size, np.float64)
        for pos, i in enumerate(indices):
            saved = flat[i]
            flat[i] = saved + step
            up = loss_fn(None).data.item()
            flat[i] = saved - step
            down = loss_fn(None).data.item()
            flat[i] = saved
            numeric[pos] = (up - down) / (2.0 * step)
        worst = max(worst, max_rel_error(analytic[name].reshape(-1)[indices],
                                         numeric))
    return worst


def _conv_case(rng, spec, h=6, w=6, n=1):
    x = Tensor(rng.standard_normal((n, spec.in_channels, h, w)))
    k = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    weight = Tensor(rng.standard_normal(k))
    bias = Tensor(rng.standard_normal(spec.out_channels)) if spec.has_bias else None
    wrt = [("input", x), ("weight", weight)]
    if bias is not None:
        wrt.append(("bias", bias))

    def loss_fn(tape):
        y = conv2d(x, weight, bias, spec, tape)
        return tensor_sum(_squash(y, tape), tape)

    return loss_fn, wrt


def _squash(y, tape):
    # weight the output elements so the summed loss is not permutation-blind
    weights = np.cos(np.arange(y.size, dtype=np.float64)).reshape(y.shape)
    out = Tensor(y.data * weights, dtype=y.dtype)
    if tape is not None:
        tape.record(out, [y], lambda g: [g * weights])
    return out


def suite_cases(seed):
    """Named gradient checks covering every primitive and one full module."""
    rng = np.random.default_rng(seed)
    cases = []

    conv_specs = [
        ("conv2d_3x3_same", ConvSpec.same(3, 3, 4, 3)),
        ("conv2d_3x3_dilation2", ConvSpec.same(3, 3, 3, 2, dilation=2)),
        ("conv2d_3x3_stride2", ConvSpec(3, 3, 3, 4, stride=2,
                                        padding_h=1, padding_w=1)),
        ("conv2d_3x1_dilation2", ConvSpec.same(3, 1, 3, 3, dilation=2)),
        ("conv2d_1x3_dilation2", ConvSpec.same(1, 3, 3, 3, dilation=2)),
        ("conv2d_1x1_bias", ConvSpec(1, 1, 4, 5, has_bias=True)),
    ]
    for name, spec in conv_specs:
        loss_fn, wrt = _conv_case(rng, spec)
        cases.append((name, loss_fn, wrt, None, DEFAULT_STEP))

    x = Tensor(_away_from_zero(rng.standard_normal((1, 4, 6, 6))))
    alpha = Tensor(rng.uniform(0.1, 0.5, 4))

    def prelu_loss(tape, x=x, alpha=alpha):
        return tensor_sum(_squash(prelu(x, alpha, tape), tape), tape)

    cases.append(("prelu", prelu_loss, [("input", x), ("alpha", alpha)],
                  None, DEFAULT_STEP))

    xb = Tensor(rng.standard_normal((2, 3, 5, 5)))
    gamma = Tensor(rng.uniform(0.5, 1.5, 3))
    beta = Tensor(rng.standard_normal(3))

    def bn_loss(tape, xb=xb, gamma=gamma, beta=beta):
        running_mean = np.zeros(3)
        running_var = np.ones(3)
        y = batch_norm(xb, gamma, beta, running_mean, running_var,
                       mode="train", tape=tape)
        return tensor_sum(_squash(y, tape), tape)

    cases.append(("batch_norm_train", bn_loss,
                  [("input", xb), ("gamma", gamma), ("beta", beta)],
                  None, DEFAULT_STEP))

    xu = Tensor(rng.standard_normal((1, 3, 4, 5)))

    def up_loss(tape, xu=xu):
        return tensor_sum(_squash(bilinear_upsample(xu, 2, tape), tape), tape)

    cases.append(("bilinear_upsample_x2", up_loss, [("input", xu)],
                  None, DEFAULT_STEP))

    # spread pooled values so no window has near-ties within the fd step
    pool_data = rng.permutation(36).reshape(1, 1, 6, 6) * 0.5 \
        + rng.standard_normal((1, 1, 6, 6)) * 0.01
    xp = Tensor(pool_data)

    def pool_loss(tape, xp=xp):
        return tensor_sum(_squash(maxpool2x2(xp, tape), tape), tape)

    cases.append(("maxpool2x2", pool_loss, [("input", xp)], None,
                  DEFAULT_STEP))

    xa = Tensor(rng.standard_normal((1, 3, 6, 6)))

    def avg_loss(tape, xa=xa):
        return tensor_sum(_squash(avgpool(xa, 2, tape), tape), tape)

    cases.append(("avgpool_2", avg_loss, [("input", xa)], None,
                  DEFAULT_STEP))

    logits = Tensor(rng.standard_normal((1, 5, 4, 4)))
    labels = rng.integers(0, 5, (1, 4, 4)).astype(np.int32)
    labels[0, 0, 0] = 255

    def ce_loss(tape, logits=logits, labels=labels):
        return cross_entropy_loss(logits, labels, 255, tape)

    cases.append(("cross_entropy", ce_loss, [("logits", logits)], None,
                  DEFAULT_STEP))

    module = CFPModule(CFPModuleConfig(32, 4), np.random.default_rng(seed + 1),
                       dtype=np.float64)
    xm = Tensor(rng.standard_normal((1, 32, 6, 6)))
    module_params = [("input", xm)] + list(module.named_parameters("cfp"))

    def module_loss(tape, module=module, xm=xm):
        y = module.forward(xm, tape=tape, mode="infer")
        return tensor_sum(_squash(y, tape), tape)

    # the composite has many internal PReLU kinks, and a perturbation can
    # flip a downstream unit with probability proportional to the step, so
    # this case probes with a much finer step than the primitives
    cases.append(("cfp_module_m32_k4_r4", module_loss, module_params, 40,
                  MODULE_STEP))
    return cases


def run_suite(seed=0, tolerance=DEFAULT_TOLERANCE):
    """Run every check; returns [(name, max_rel_err, passed)]."""
    rng = np.random.default_rng(seed + 12345)
    results = []
    for name, loss_fn, wrt, max_coords, step in suite_cases(seed):
        err = check_gradients(loss_fn, wrt, step=step, max_coords=max_coords,
                              rng=rng)
        results.append((name, err, err <= tolerance))
    return results
