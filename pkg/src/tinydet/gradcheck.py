"""Analytic-vs-central-difference gradient checks, all in float64.

Each check draws a random configuration, computes analytic gradients with
the hand-written backward passes and compares them element by element with
central differences ``(f(x + h) - f(x - h)) / 2h``.

Relative error of an element is ``|a - n| / max(|a|, |n|, floor)`` with
``floor = max(1e-6, 1e-4 * max|a|)`` over the array being checked, so that
entries four orders of magnitude below the array's largest gradient are
judged against that scale rather than dividing round-off by round-off.

Draws whose forward pass puts a leaky pre-activation or a max-pool runner-up
within ``KINK_MARGIN`` of a switching point are redrawn: central differences
straddling a kink measure neither one-sided derivative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (Network, conv_backward, conv_forward, maxpool_backward, maxpool_forward,
                     route_backward, route_forward, upsample_backward, upsample_forward)
from .netdef import ConvLayer, ConvParams, MaxPoolLayer, micro_cfg, parse_cfg
from .postprocess import Box
from .dataset import GroundTruth
from .trainer import build_targets, ignore_mask, init_weights, trainable, trainable_grads, yolo_loss

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6
SCALE_FLOOR = 1e-4
KINK_MARGIN = 1e-3


def rel_error(analytic, numeric, floor=None) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    if floor is None:
        floor = max(FLOOR, SCALE_FLOOR * float(np.max(np.abs(a))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f, x, h=STEP, indices=None, signature=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (modified in place).

    If ``signature`` is given it is called after every ``f()`` and must return
    bytes describing the piecewise-linear regime (activation signs, pooling
    argmaxes). Entries whose two steps land in a different regime from the
    base point come back as NaN; :func:`rel_error` skips them.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    base = None
    if signature is not None:
        f()
        base = signature()
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        moved = base is not None and signature() != base
        flat[i] = old - h
        down = f()
        moved = moved or (base is not None and signature() != base)
        flat[i] = old
        out[i] = np.nan if moved else (up - down) / (2 * h)
    return out.reshape(x.shape)


@dataclass
class CheckResult:
    kind: str
    draws: int
    max_error: float
    skipped: int = 0  # entries excluded because a step crossed a kink

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _random_conv(rng):
    while True:
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(3, 7, size=2))
        k = int(rng.choice([1, 2, 3]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        out_c = int(rng.integers(1, 4))
        if (h + 2 * pad - k) // stride + 1 >= 1 and (w + 2 * pad - k) // stride + 1 >= 1:
            break
    bn = bool(rng.integers(0, 2))
    act = str(rng.choice(["leaky", "linear"]))
    weights = rng.standard_normal((out_c, c, k, k))
    biases = rng.standard_normal(out_c)
    extra = ()
    if bn:
        extra = (rng.uniform(0.5, 1.5, out_c), rng.standard_normal(out_c) * 0.1,
                 rng.uniform(0.5, 2.0, out_c))
    params = ConvParams(weights, biases, *extra)
    x = rng.standard_normal((n, c, h, w))
    return x, params, stride, pad, act


def check_conv(rng, draws=20) -> CheckResult:
    worst = 0.0
    done = 0
    while done < draws:
        x, params, stride, pad, act = _random_conv(rng)
        y, cache = conv_forward(x, params, stride, pad, act)
        if act == "leaky" and np.min(np.abs(cache.preact)) < KINK_MARGIN:
            continue  # a difference step could cross the leaky kink
        r = rng.standard_normal(y.shape)
        loss = lambda: float(np.sum(r * conv_forward(x, params, stride, pad, act)[0]))  # noqa: E731
        dx, grads = conv_backward(r, cache)
        worst = max(worst, rel_error(dx, numeric_grad(loss, x)))
        worst = max(worst, rel_error(grads.weights, numeric_grad(loss, params.weights)))
        worst = max(worst, rel_error(grads.biases, numeric_grad(loss, params.biases)))
        if params.batch_normalize:
            worst = max(worst, rel_error(grads.scales, numeric_grad(loss, params.scales)))
        done += 1
    return CheckResult("convolutional", draws, worst)


def check_maxpool(rng, draws=20) -> CheckResult:
    worst = 0.0
    for _ in range(draws):
        size = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, size))
        h, w = (int(v) for v in rng.integers(size + 1, 8, size=2))
        # distinct values spaced well beyond the step keep argmax stable
        x = rng.permutation(2 * h * w * 2).astype(np.float64)[: 2 * 2 * h * w].reshape(2, 2, h, w) * 0.01
        y, cache = maxpool_forward(x, size, stride, pad)
        r = rng.standard_normal(y.shape)
        loss = lambda: float(np.sum(r * maxpool_forward(x, size, stride, pad)[0]))  # noqa: E731
        worst = max(worst, rel_error(maxpool_backward(r, cache), numeric_grad(loss, x)))
    return CheckResult("maxpool", draws, worst)


def check_upsample(rng, draws=20) -> CheckResult:
    worst = 0.0
    for _ in range(draws):
        f = int(rng.integers(1, 4))
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), 3, 4))
        r = rng.standard_normal((x.shape[0], x.shape[1], 3 * f, 4 * f))
        loss = lambda: float(np.sum(r * upsample_forward(x, f)))  # noqa: E731
        worst = max(worst, rel_error(upsample_backward(r, f), numeric_grad(loss, x)))
    return CheckResult("upsample", draws, worst)


def check_route(rng, draws=20) -> CheckResult:
    worst = 0.0
    for _ in range(draws):
        n, h, w = 2, 3, 3
        xs = [rng.standard_normal((n, int(rng.integers(1, 4)), h, w)) for _ in range(int(rng.integers(1, 4)))]
        r = rng.standard_normal((n, sum(x.shape[1] for x in xs), h, w))
        loss = lambda: float(np.sum(r * route_forward(xs)))  # noqa: E731
        parts = route_backward(r, [x.shape[1] for x in xs])
        for x, g in zip(xs, parts):
            worst = max(worst, rel_error(g, numeric_grad(loss, x)))
    return CheckResult("route", draws, worst)


GRADCHECK_MICRO = """
[net]
width=16
height=16
channels=3
[convolutional]
batch_normalize=1
filters=3
size=3
stride=2
pad=1
activation=leaky
[convolutional]
filters=4
size=3
stride=2
pad=1
activation=leaky
[convolutional]
filters=11
size=3
stride=1
pad=1
activation=linear
[yolo]
mask=0
anchors=5,5
classes=6
"""

GRADCHECK_TWO_SCALE = """
[net]
width=16
height=16
channels=3
[convolutional]
batch_normalize=1
filters=3
size=3
stride=1
pad=1
activation=leaky
[maxpool]
size=2
stride=2
[convolutional]
batch_normalize=1
filters=4
size=3
stride=1
pad=1
activation=leaky
[maxpool]
size=2
stride=2
[convolutional]
filters=14
size=1
stride=1
pad=1
activation=linear
[yolo]
mask=2,3
anchors=3,3, 5,6, 8,8, 12,10
classes=2
[route]
layers=-4
[upsample]
stride=2
[route]
layers=-1, 0
[convolutional]
filters=14
size=1
stride=1
pad=1
activation=linear
[yolo]
mask=0,1
anchors=3,3, 5,6, 8,8, 12,10
classes=2
"""


def _random_truths(rng, n_images, classes):
    out = []
    for _ in range(n_images):
        truths = []
        for _ in range(int(rng.integers(0, 3))):
            w, h = rng.uniform(0.1, 0.6, size=2)
            truths.append(GroundTruth(int(rng.integers(classes)),
                                      Box(float(rng.uniform(w / 2, 1 - w / 2)),
                                          float(rng.uniform(h / 2, 1 - h / 2)), float(w), float(h))))
        out.append(truths)
    return out


def check_yolo_loss(rng, draws=20) -> CheckResult:
    cfg = parse_cfg(GRADCHECK_TWO_SCALE)
    layers = cfg.yolo_layers
    worst = 0.0
    for _ in range(draws):
        n = int(rng.integers(1, 3))
        s = int(rng.integers(2, 4))
        outputs = [rng.standard_normal((n, l.depth, s * f, s * f)) for l, f in zip(layers, (1, 2))]
        truths = _random_truths(rng, n, cfg.classes)
        size = (cfg.input_w, cfg.input_h)
        targets = build_targets(truths, layers, [o.shape[2:] for o in outputs], size)
        ignore = [ignore_mask(o, l, truths, size) for o, l in zip(outputs, layers)]
        _, grads = yolo_loss(outputs, layers, targets, ignore)
        loss = lambda: yolo_loss(outputs, layers, targets, ignore)[0]  # noqa: E731
        for o, g in zip(outputs, grads):
            worst = max(worst, rel_error(g, numeric_grad(loss, o)))
    return CheckResult("yolo_loss", draws, worst)


def check_network(rng, text=GRADCHECK_MICRO, draws=20, kind="network", max_coords=None,
                  screen=True) -> CheckResult:
    """End-to-end loss gradient for every trainable parameter of a graph.

    ``text`` is cfg source or a parsed :class:`NetConfig`. With ``max_coords``
    set, each draw checks that many random entries per parameter array
    instead of all of them. ``screen=False`` skips the kink screening, which
    wide layers would never pass.
    """
    cfg = parse_cfg(text) if isinstance(text, str) else text
    worst = 0.0
    skipped = 0
    done = 0
    while done < draws:
        seed = int(rng.integers(2**31))
        weights = init_weights(cfg, seed, dtype=np.float64)
        for p in weights.convs.values():
            p.biases[...] = rng.standard_normal(p.biases.shape) * 0.1
            if p.batch_normalize:
                p.scales[...] = rng.uniform(0.5, 1.5, p.scales.shape)
        net = Network(cfg, weights)
        n = 2
        batch = rng.uniform(0, 1, (n,) + cfg.input_shape)
        truths = _random_truths(rng, n, cfg.classes)
        if screen and _near_kink(net, batch):
            continue
        heads = net.forward(batch, train=True)
        layers = [h.layer for h in heads]
        outputs = [h.output for h in heads]
        size = (cfg.input_w, cfg.input_h)
        targets = build_targets(truths, layers, [o.shape[2:] for o in outputs], size)
        ignore = [ignore_mask(o, l, truths, size) for o, l in zip(outputs, layers)]
        _, head_grads = yolo_loss(outputs, layers, targets, ignore)
        analytic = trainable_grads(net.backward(head_grads))

        def loss():
            hs = net.forward(batch, train=True)
            return yolo_loss([h.output for h in hs], layers, targets, ignore)[0]

        def signature():
            return _regime(net)

        for param, grad in zip(trainable(weights), analytic):
            idx = None
            if max_coords is not None and param.size > max_coords:
                idx = rng.choice(param.size, size=max_coords, replace=False)
            num = numeric_grad(loss, param, indices=idx, signature=signature)
            skipped += int(np.isnan(num.reshape(-1)[idx] if idx is not None else num).sum())
            if idx is None:
                worst = max(worst, rel_error(grad, num))
            else:
                worst = max(worst, rel_error(grad.reshape(-1)[idx], num.reshape(-1)[idx]))
        done += 1
    return CheckResult(kind, draws, worst, skipped)


def _regime(net) -> bytes:
    parts = []
    for cache in net._caches:
        if getattr(cache, "activation", None) == "leaky":
            parts.append(np.packbits(cache.preact > 0).tobytes())
        elif hasattr(cache, "argmax"):
            parts.append(cache.argmax.tobytes())
    return b"".join(parts)


def _pool_gap(x, size, stride, pad):
    """Smallest gap between the best and runner-up value of any pooling window."""
    off = pad // 2
    n, c, h, w = x.shape
    oh = (h + pad - size) // stride + 1
    ow = (w + pad - size) // stride + 1
    padded = np.full((n, c, h + 2 * size, w + 2 * size), -np.inf)
    padded[:, :, size:size + h, size:size + w] = x
    start = size - off
    win = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(2, 3))
    win = win[:, :, start:start + (oh - 1) * stride + 1:stride, start:start + (ow - 1) * stride + 1:stride]
    flat = win.reshape(n, c, oh, ow, -1)
    if flat.shape[-1] < 2:
        return np.inf
    top = np.sort(flat, axis=-1)[..., -2:]
    gap = top[..., 1] - top[..., 0]
    gap = gap[np.isfinite(gap)]
    return float(gap.min()) if gap.size else np.inf


def _near_kink(net, batch):
    outputs = []
    x = batch
    for node in net.cfg.nodes:
        if isinstance(node, MaxPoolLayer) and _pool_gap(x, node.size, node.stride, node.padding) < KINK_MARGIN:
            return True
        x, cache = net._forward_node(node, x, outputs)
        if isinstance(node, ConvLayer) and node.activation == "leaky" and np.min(np.abs(cache.preact)) < KINK_MARGIN:
            return True
        outputs.append(x)
    return False


def run_suite(seed=0, draws=20, progress=None):
    """Run every check; returns a list of :class:`CheckResult`."""
    rng = np.random.default_rng(seed)
    checks = [
        lambda: check_conv(rng, draws),
        lambda: check_maxpool(rng, draws),
        lambda: check_upsample(rng, draws),
        lambda: check_route(rng, draws),
        lambda: check_yolo_loss(rng, draws),
        lambda: check_network(rng, GRADCHECK_MICRO, draws, "network (micro)"),
        lambda: check_network(rng, GRADCHECK_TWO_SCALE, draws, "network (two-scale)"),
        lambda: check_network(rng, micro_cfg(), draws, "network (micro-detector, sampled)",
                              max_coords=4, screen=False),
    ]
    results = []
    for check in checks:
        result = check()
        results.append(result)
        if progress is not None:
            progress(result)
    return results
