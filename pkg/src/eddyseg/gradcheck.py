"""Central finite-difference gradient checking for the autodiff ops.

``gradcheck`` compares analytic tape gradients against (f(x+d)-f(x-d))/2d
on float64 tensors. ``run_suite`` covers every op the network uses plus an
end-to-end network+loss check and backs the ``eddyseg gradcheck`` command.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from eddyseg import losses
from eddyseg.autodiff import (ConvSpec, Tape, Tensor4, add, batchnorm2d,
                              BatchNormState, conv2d, conv_transpose2d,
                              dropout, maxpool2d, record, relu,
                              softmax_channel, tensor_sum)
from eddyseg.network import NetworkSpec, build_network, lateral_merge


@dataclass
class GradReport:
    max_rel_err: float
    passed: bool
    tol: float
    entries_checked: int
    worst: tuple = ()  # (input index, flat element index, analytic, numeric)


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradcheck(op_closure, inputs, step=1e-5, tol=1e-4, rng=None, max_entries=None,
              atol=0.0):
    """Check analytic grads of ``op_closure(*inputs)`` for every
    requires_grad input, via central differences on a fixed random
    projection of the output. Inputs must be float64.

    Entries where analytic and numeric values both sit below ``atol`` count
    as exact matches; that keeps structurally-zero gradients (e.g. through
    dropped-out units) from being scored against difference noise. For ops
    linear in each input entry a large ``step`` is exact and suppresses
    cancellation error."""
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs")

    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = op_closure(*inputs)
        proj = rng.standard_normal(out.dims)
        s = tensor_sum(out, proj)
    tape.backward(s)

    def forward_value():
        return float((op_closure(*inputs).data * proj).sum())

    max_err = 0.0
    worst = ()
    checked = 0
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros(t.dims)
        flat = t.data.reshape(-1)
        n_el = flat.size
        if max_entries is not None and n_el > max_entries:
            elements = np.sort(rng.choice(n_el, size=max_entries, replace=False))
        else:
            elements = np.arange(n_el)
        for el in elements:
            orig = flat[el]
            flat[el] = orig + step
            f_plus = forward_value()
            flat[el] = orig - step
            f_minus = forward_value()
            flat[el] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a_el = analytic.reshape(-1)[el]
            if max(abs(a_el), abs(numeric)) <= atol:
                err = 0.0
            else:
                err = _rel_err(a_el, numeric)
            checked += 1
            if err > max_err:
                max_err = err
                worst = (idx, int(el), float(analytic.reshape(-1)[el]), numeric)
    return GradReport(max_rel_err=max_err, passed=max_err <= tol,
                      tol=tol, entries_checked=checked, worst=worst)


# ---------------------------------------------------------------------------
# Standard suite
# ---------------------------------------------------------------------------

def _t(rng, *dims, lo=-1.0, hi=1.0):
    return Tensor4(rng.uniform(lo, hi, dims), requires_grad=True)


def _away_from_zero(rng, *dims, margin=0.1):
    mag = rng.uniform(margin, 1.0, dims)
    sign = np.where(rng.random(dims) < 0.5, -1.0, 1.0)
    return Tensor4(mag * sign, requires_grad=True)


def _distinct(rng, *dims):
    # integer-spaced values: a 1e-5 step can never flip a pooling argmax
    vals = rng.permutation(int(np.prod(dims))).astype(np.float64)
    return Tensor4(vals.reshape(dims) * 0.5, requires_grad=True)


def _broken_double(x):
    # test fixture: forward doubles, backward deliberately wrong
    out = Tensor4(x.data * 2.0, requires_grad=x.requires_grad)
    return record("broken_double", (x,), out, lambda g: (g * 2.02,))


def _check_conv(rng, dilation, kernel=3, stride=1):
    spec = ConvSpec(in_channels=3, out_channels=4, kernel=(kernel, kernel),
                    stride=stride, dilation=dilation,
                    padding=dilation * (kernel - 1) // 2)
    x = _t(rng, 2, 3, 9, 9)
    w = _t(rng, 4, 3, kernel, kernel)
    b = _t(rng, 1, 4, 1, 1)
    return lambda xx, ww, bb: conv2d(xx, ww, bb, spec), [x, w, b]


def _check_deconv(rng):
    x = _t(rng, 2, 4, 3, 3)
    w = _t(rng, 4, 2, 2, 2)
    b = _t(rng, 1, 2, 1, 1)
    return conv_transpose2d, [x, w, b]


def _check_bn(rng, mode):
    state = BatchNormState.create(3, dtype=np.float64)
    if mode == "eval":
        state.running_mean += rng.uniform(-0.5, 0.5, state.running_mean.shape)
        state.running_var *= rng.uniform(0.5, 2.0, state.running_var.shape)
    x = _t(rng, 2, 3, 4, 4)
    gamma = _t(rng, 1, 3, 1, 1, lo=0.5, hi=1.5)
    beta = _t(rng, 1, 3, 1, 1)
    return (lambda xx, gg, bb: batchnorm2d(xx, gg, bb, state, mode)), [x, gamma, beta]


def _check_merge(rng):
    high = _t(rng, 1, 4, 6, 6)
    skip = _t(rng, 1, 4, 6, 6)
    w = _t(rng, 4, 4, 3, 3)
    b = _t(rng, 1, 4, 1, 1)
    return (lambda h, s, ww, bb: lateral_merge(h, s, ww, bb, rate=4)), [high, skip, w, b]


def _check_losses(rng, which):
    logits = _t(rng, 2, 3, 5, 5, lo=-2.0, hi=2.0)
    classes = rng.integers(0, 3, (2, 5, 5))

    def run(lg):
        probs = softmax_channel(lg)
        if which == "ce":
            return losses.cross_entropy(probs, classes)
        if which == "dice":
            return losses.dice_loss_op(probs, losses.one_hot(classes, dtype=np.float64))[0]
        loss, _ = losses.combined_loss(probs, classes)
        return loss

    return run, [logits]


def _check_network(rng):
    spec = NetworkSpec(in_channels=4)
    net = build_network(spec, rng, dtype=np.float64)
    # the head initializes to zero; give it real weights so gradients
    # reach every upstream parameter
    head = net.params["head.w"]
    head.data = rng.uniform(-0.5, 0.5, head.dims)
    x = Tensor4(rng.uniform(-1, 1, (2, 4, 16, 16)))
    classes = rng.integers(0, 3, (2, 16, 16))
    drop_seed = int(rng.integers(0, 2**31))

    def run(*params):
        probs = net.forward(x, mode="train", rng=np.random.default_rng(drop_seed))
        loss, _ = losses.combined_loss(probs, classes)
        return loss

    all_params = list(net.named_parameters().values())
    picked = rng.choice(len(all_params), size=min(25, len(all_params)), replace=False)
    wrt = [all_params[i] for i in sorted(picked)]
    return run, wrt


def run_suite(seed=0, instances=5, inject_fault=False, network_instances=1,
              network_params=50):
    """Run every gradient check; returns a list of (name, GradReport).

    Per-op tolerances: 1e-6 for (piecewise-)linear ops, 1e-5 for batchnorm,
    softmax and the lateral merge, 1e-4 for the losses and the end-to-end
    network check.
    """
    results = []
    # central differences are exact for entry-wise-linear ops, so those use
    # a coarse step that drowns cancellation noise; smooth nonlinear ops
    # keep the classic 1e-5
    coarse = 1e-2

    def runs(name, maker, tol, max_entries=None, n=instances, step=1e-5, atol=0.0):
        for k in range(n):
            rng = np.random.default_rng([seed, zlib.crc32(name.encode()), k])
            op, inputs = maker(rng)
            report = gradcheck(op, inputs, step=step, tol=tol, rng=rng,
                               max_entries=max_entries, atol=atol)
            results.append((f"{name}[{k}]", report))

    runs("conv2d_rate1", lambda r: _check_conv(r, 1), 1e-6, step=coarse)
    runs("conv2d_rate2", lambda r: _check_conv(r, 2), 1e-6, step=coarse)
    runs("conv2d_rate4", lambda r: _check_conv(r, 4), 1e-6, step=coarse)
    runs("conv2d_1x1", lambda r: _check_conv(r, 1, kernel=1), 1e-6, step=coarse)
    runs("conv2d_stride2", lambda r: _check_conv(r, 1, stride=2), 1e-6, step=coarse)
    runs("conv_transpose2d", _check_deconv, 1e-6, step=coarse)
    runs("maxpool2d", lambda r: (maxpool2d, [_distinct(r, 1, 2, 6, 6)]), 1e-6,
         step=coarse)
    runs("batchnorm2d_train", lambda r: _check_bn(r, "train"), 1e-5)
    runs("batchnorm2d_eval", lambda r: _check_bn(r, "eval"), 1e-6, step=coarse)
    runs("relu", lambda r: (relu, [_away_from_zero(r, 2, 3, 4, 4)]), 1e-6,
         step=coarse)
    runs("add_relu", lambda r: ((lambda a, b: relu(add(a, b))),
                                [_away_from_zero(r, 2, 2, 3, 3),
                                 _t(r, 2, 2, 3, 3, lo=1.2, hi=2.0)]), 1e-6,
         step=coarse)
    runs("dropout_train", lambda r: ((lambda x: dropout(x, 0.4, "train",
                                                        np.random.default_rng(99))),
                                     [_t(r, 2, 3, 4, 4)]), 1e-6, step=coarse)
    runs("softmax_channel", lambda r: (softmax_channel,
                                       [_t(r, 2, 3, 4, 4, lo=-2, hi=2)]), 1e-5)
    runs("tensor_sum", lambda r: ((lambda x, w=r.standard_normal((1, 2, 3, 3)):
                                   tensor_sum(x, w)),
                                  [_t(r, 1, 2, 3, 3)]), 1e-6, step=coarse)
    runs("lateral_merge", _check_merge, 1e-5, step=coarse)
    runs("cross_entropy", lambda r: _check_losses(r, "ce"), 1e-4)
    runs("dice_loss", lambda r: _check_losses(r, "dice"), 1e-4)
    runs("combined_loss", lambda r: _check_losses(r, "combined"), 1e-4)
    # fine step: a parameter nudge shifts every downstream activation, and
    # 1e-6 keeps the odds of stepping across a relu/pool kink negligible
    # while staying above cancellation noise; atol masks gradients too small
    # for central differences to resolve at all
    runs("network_end_to_end", _check_network, 1e-4,
         max_entries=max(1, network_params // 25), n=network_instances,
         step=1e-6, atol=1e-6)

    if inject_fault:
        runs("injected_bad_backward", lambda r: (_broken_double, [_t(r, 1, 1, 2, 2)]),
             1e-6, n=1, step=coarse)
    return results


def suite_passed(results):
    return all(report.passed for _, report in results)
