"""Loss, optimizers, training loop and the factorial grid-search runner."""
from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, TinyDetError, TrainingError
from .layers import LEAKY_SLOPE, Network
from .metrics import EvalReport, EvalThresholds, evaluate_model, report_cells
from .netdef import ConvParams, ModelWeights, NetConfig
from .postprocess import iou_matrix, sigmoid

log = logging.getLogger(__name__)


# Configuration -------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got '{self.kind}'")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


@dataclass(frozen=True)
class LossWeights:
    coord: float = 1.0
    objectness: float = 1.0
    classes: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0
    loss_weights: LossWeights = LossWeights()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


# Optimizers ----------------------------------------------------------------------

class SGD:
    """Plain gradient descent: ``p -= lr * g``."""

    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, grads):
        self.t += 1
        for p, g in zip(self.params, grads):
            p -= p.dtype.type(self.lr) * g.astype(p.dtype, copy=False)


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: OptimizerConfig, params):
    if config.kind == "sgd":
        return SGD(params, config.learning_rate)
    return Adam(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)


def trainable(weights: ModelWeights):
    """Trainable arrays in a fixed order: per conv layer weights, biases, scales."""
    out = []
    for i in sorted(weights.convs):
        p = weights.convs[i]
        out += [p.weights, p.biases] + ([p.scales] if p.batch_normalize else [])
    return out


def trainable_grads(grads: dict):
    out = []
    for i in sorted(grads):
        g = grads[i]
        out += [g.weights, g.biases] + ([g.scales] if g.scales is not None else [])
    return out


# Initialisation -----------------------------------------------------------------

def init_weights(cfg: NetConfig, seed: int, dtype=np.float32) -> ModelWeights:
    """Scaled-uniform kernels, zero biases, unit scales, rolling stats (0, 1).

    The kernel bound is ``gain * sqrt(3 / fan_in)`` with the leaky-ReLU gain
    for leaky layers and 1 for linear layers.
    """
    rng = np.random.default_rng(seed)
    convs = {}
    for c in cfg.conv_layers:
        fan_in = c.in_c * c.size * c.size
        gain = math.sqrt(2.0 / (1 + LEAKY_SLOPE ** 2)) if c.activation == "leaky" else 1.0
        bound = gain * math.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(c.filters, c.in_c, c.size, c.size)).astype(dtype)
        zeros = np.zeros(c.filters, dtype=dtype)
        if c.batch_normalize:
            convs[c.index] = ConvParams(w, zeros, np.ones(c.filters, dtype=dtype),
                                        zeros.copy(), np.ones(c.filters, dtype=dtype))
        else:
            convs[c.index] = ConvParams(w, zeros)
    return ModelWeights(convs)


# Targets and loss -----------------------------------------------------------------

@dataclass
class HeadTargets:
    """Training targets for one head over a batch.

    Arrays are indexed (image, slot, row, col); ``xy``/``wh`` add a trailing
    axis of 2 and ``classes`` one of n_classes.
    """

    mask: np.ndarray
    xy: np.ndarray
    wh: np.ndarray
    classes: np.ndarray

    @classmethod
    def empty(cls, n, layer, rows, cols):
        s = len(layer.mask)
        return cls(np.zeros((n, s, rows, cols), dtype=bool),
                   np.zeros((n, s, rows, cols, 2)), np.zeros((n, s, rows, cols, 2)),
                   np.zeros((n, s, rows, cols, layer.classes)))


def _anchor_iou(w, h, aw, ah):
    inter = min(w, aw) * min(h, ah)
    union = w * h + aw * ah - inter
    return inter / union if union > 0 else 0.0


def best_anchor(truth, layers, input_size):
    """(head, slot) whose anchor best matches the truth's size, co-centred.

    Candidates are every anchor selected by some head's mask, tried in
    ascending anchor index; the first maximum wins.
    """
    in_w, in_h = input_size
    candidates = []
    for k, layer in enumerate(layers):
        for s, m in enumerate(layer.mask):
            candidates.append((m, k, s, layer.anchors[m]))
    candidates.sort(key=lambda c: c[0])
    best = None
    for m, k, s, (aw, ah) in candidates:
        score = _anchor_iou(truth.box.w, truth.box.h, aw / in_w, ah / in_h)
        if best is None or score > best[0]:
            best = (score, k, s)
    return best[1], best[2]


def assign_targets(truths, layers, grid_sizes, input_size, batch_index=0, targets=None):
    """Place each truth in exactly one (head, slot, cell).

    Args:
        truths: ground truths of one image.
        layers: yolo layers, coarse first.
        grid_sizes: (rows, cols) per head.
        input_size: network (width, height) in pixels.
        targets: per-head :class:`HeadTargets` to fill; created for a single
            image when omitted.

    Returns:
        ``(targets, assignments)`` with assignments as (head, slot, row, col).
    """
    if targets is None:
        targets = [HeadTargets.empty(1, l, *g) for l, g in zip(layers, grid_sizes)]
    in_w, in_h = input_size
    assignments = []
    for truth in truths:
        k, s = best_anchor(truth, layers, input_size)
        rows, cols = grid_sizes[k]
        b = truth.box
        i = min(max(int(math.floor(b.cy * rows)), 0), rows - 1)
        j = min(max(int(math.floor(b.cx * cols)), 0), cols - 1)
        aw, ah = layers[k].slot_anchors[s]
        t = targets[k]
        t.mask[batch_index, s, i, j] = True
        t.xy[batch_index, s, i, j] = (b.cx * cols - j, b.cy * rows - i)
        t.wh[batch_index, s, i, j] = (math.log(max(b.w * in_w, 1e-9) / aw),
                                      math.log(max(b.h * in_h, 1e-9) / ah))
        t.classes[batch_index, s, i, j] = 0.0
        t.classes[batch_index, s, i, j, truth.class_id] = 1.0
        assignments.append((k, s, i, j))
    return targets, assignments


def build_targets(batch_truths, layers, grid_sizes, input_size):
    n = len(batch_truths)
    targets = [HeadTargets.empty(n, l, *g) for l, g in zip(layers, grid_sizes)]
    for b, truths in enumerate(batch_truths):
        assign_targets(truths, layers, grid_sizes, input_size, b, targets)
    return targets


def _softplus(x):
    return np.logaddexp(0.0, x)


def ignore_mask(output, layer, truths_per_image, input_size):
    """Slots whose decoded box overlaps some truth with IoU > ignore_thresh."""
    n, _, rows, cols = output.shape
    s = len(layer.mask)
    t = output.reshape(n, s, 5 + layer.classes, rows, cols).astype(np.float64)
    in_w, in_h = input_size
    anchors = np.array(layer.slot_anchors, dtype=np.float64)
    jj = np.arange(cols)[None, None, :]
    ii = np.arange(rows)[None, :, None]
    out = np.zeros((n, s, rows, cols), dtype=bool)
    for b, truths in enumerate(truths_per_image):
        if not truths:
            continue
        with np.errstate(over="ignore"):
            boxes = np.stack([
                (sigmoid(t[b, :, 0]) + jj) / cols,
                (sigmoid(t[b, :, 1]) + ii) / rows,
                anchors[:, 0, None, None] * np.exp(t[b, :, 2]) / in_w,
                anchors[:, 1, None, None] * np.exp(t[b, :, 3]) / in_h,
            ], axis=-1).reshape(-1, 4)
        gt = np.array([[g.box.cx, g.box.cy, g.box.w, g.box.h] for g in truths])
        best = iou_matrix(boxes, gt).max(axis=1)
        out[b] = (best > layer.ignore_thresh).reshape(s, rows, cols)
    return out


def yolo_loss(outputs, layers, targets, ignore=None, weights: LossWeights = LossWeights()):
    """Loss averaged over the batch, and its gradient for every head output.

    Per image: squared error on (sig(tx), sig(ty), tw, th) at assigned
    slots, binary cross-entropy on objectness everywhere except ignored
    unassigned slots, and per-class binary cross-entropy at assigned slots.

    Args:
        outputs: head arrays (n, depth, rows, cols), coarse first.
        layers: matching yolo layers.
        targets: matching :class:`HeadTargets`.
        ignore: optional boolean arrays (n, slots, rows, cols) from
            :func:`ignore_mask`; the mask is held fixed for the gradient.
    """
    total = 0.0
    grads = []
    for k, (out, layer, tgt) in enumerate(zip(outputs, layers, targets)):
        n, _, rows, cols = out.shape
        s = len(layer.mask)
        t = out.reshape(n, s, 5 + layer.classes, rows, cols).astype(np.float64)
        g = np.zeros_like(t)
        mask = tgt.mask
        m = mask.astype(np.float64)

        sx = sigmoid(t[:, :, 0])
        sy = sigmoid(t[:, :, 1])
        ex = sx - tgt.xy[..., 0]
        ey = sy - tgt.xy[..., 1]
        ew = t[:, :, 2] - tgt.wh[..., 0]
        eh = t[:, :, 3] - tgt.wh[..., 1]
        total += weights.coord * float(np.sum(m * (ex * ex + ey * ey + ew * ew + eh * eh)))
        g[:, :, 0] = weights.coord * m * 2 * ex * sx * (1 - sx)
        g[:, :, 1] = weights.coord * m * 2 * ey * sy * (1 - sy)
        g[:, :, 2] = weights.coord * m * 2 * ew
        g[:, :, 3] = weights.coord * m * 2 * eh

        to = t[:, :, 4]
        keep = np.ones_like(m) if ignore is None else (mask | ~ignore[k]).astype(np.float64)
        total += weights.objectness * float(np.sum(keep * (_softplus(to) - m * to)))
        g[:, :, 4] = weights.objectness * keep * (sigmoid(to) - m)

        tc = t[:, :, 5:]
        yc = np.moveaxis(tgt.classes, -1, 2)
        mc = m[:, :, None]
        total += weights.classes * float(np.sum(mc * (_softplus(tc) - yc * tc)))
        g[:, :, 5:] = weights.classes * mc * (sigmoid(tc) - yc)

        grads.append((g / n).reshape(out.shape).astype(out.dtype))
    n = outputs[0].shape[0] if outputs else 1
    return total / n, grads


# Training loop ----------------------------------------------------------------------

def train_step(network: Network, samples, loss_weights=LossWeights()):
    """Forward, loss and backward for one batch. Returns ``(loss, param grads)``."""
    cfg = network.cfg
    dtype = network.weights.convs[cfg.conv_layers[0].index].weights.dtype
    batch = np.concatenate([s.image for s in samples]).astype(dtype, copy=False)
    heads = network.forward(batch, train=True)
    layers = [h.layer for h in heads]
    outputs = [h.output for h in heads]
    input_size = (cfg.input_w, cfg.input_h)
    truths = [s.truths for s in samples]
    targets = build_targets(truths, layers, [o.shape[2:] for o in outputs], input_size)
    ignore = [ignore_mask(o, l, truths, input_size) for o, l in zip(outputs, layers)]
    loss, head_grads = yolo_loss(outputs, layers, targets, ignore, loss_weights)
    return loss, network.backward(head_grads)


def train(cfg: NetConfig, weights: ModelWeights, data, tc: TrainConfig, on_epoch=None):
    """Train ``weights`` in place on ``data`` (list of samples).

    Returns ``(weights, loss_curve)`` where the curve holds the mean per-image
    loss of each epoch.
    """
    if not data:
        raise ValueError("training data is empty")
    network = Network(cfg, weights)
    opt = make_optimizer(tc.optimizer, trainable(weights))
    rng = np.random.default_rng(tc.seed)
    curve = []
    for epoch in range(tc.epochs):
        order = rng.permutation(len(data))
        running = 0.0
        for b, start in enumerate(range(0, len(data), tc.batch_size)):
            chunk = [data[i] for i in order[start:start + tc.batch_size]]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = train_step(network, chunk, tc.loss_weights)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            opt.step(trainable_grads(grads))
            running += loss * len(chunk)
        weights.images_seen += len(data)
        curve.append(running / len(data))
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return weights, curve


# Grid search -------------------------------------------------------------------------

FACTOR_LABELS = {
    "optimizer": "Optimizer",
    "learning_rate": "Learning rate",
    "epochs": "Epochs",
    "batch_size": "Batch size",
}


@dataclass
class GridSpec:
    """Factorial design: every combination of ``factors`` with ``orthogonal`` fixed.

    ``factors`` maps a TrainConfig field name (optimizer, learning_rate,
    epochs, batch_size) to its levels; the first factor varies slowest.
    """

    name: str
    factors: dict
    orthogonal: dict = field(default_factory=dict)
    thresholds: EvalThresholds = EvalThresholds()
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if not self.factors or any(len(v) == 0 for v in self.factors.values()):
            raise ValueError("grid needs at least one factor with at least one level")
        overlap = set(self.factors) & set(self.orthogonal)
        if overlap:
            raise ValueError(f"fields {sorted(overlap)} are both factor and orthogonal")
        unknown = (set(self.factors) | set(self.orthogonal)) - set(FACTOR_LABELS)
        if unknown:
            raise ValueError(f"unknown grid fields {sorted(unknown)}")

    @property
    def cell_count(self) -> int:
        return math.prod(len(v) for v in self.factors.values())

    def cells(self):
        names = list(self.factors)
        for values in itertools.product(*(self.factors[n] for n in names)):
            cell = dict(self.orthogonal)
            cell.update(zip(names, values))
            yield cell

    def train_config(self, cell) -> TrainConfig:
        return TrainConfig(
            epochs=int(cell.get("epochs", 30)),
            batch_size=int(cell.get("batch_size", 4)),
            optimizer=OptimizerConfig(str(cell.get("optimizer", "adam")), float(cell["learning_rate"])),
            seed=self.seed,
        )

    def to_dict(self):
        return {
            "name": self.name,
            "factors": self.factors,
            "orthogonal": self.orthogonal,
            "thresholds": {"score": self.thresholds.score_min, "iou": self.thresholds.iou_min},
            "seed": self.seed,
            "train_fraction": self.train_fraction,
        }

    @classmethod
    def from_dict(cls, d):
        th = d.get("thresholds", {})
        return cls(d.get("name", "grid"), dict(d["factors"]), dict(d.get("orthogonal", {})),
                   EvalThresholds(float(th.get("score", 0.7)), float(th.get("iou", 0.5))),
                   int(d.get("seed", 0)), float(d.get("train_fraction", 0.8)))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def exploratory(cls, epochs=100, batch_size=64, seed=0):
        """Optimizer x learning-rate sweep (four cells)."""
        return cls("exploratory", {"learning_rate": [1e-3, 1e-5], "optimizer": ["adam", "sgd"]},
                   {"epochs": epochs, "batch_size": batch_size}, seed=seed)

    @classmethod
    def exploitation(cls, epochs=200, batch_size=64, seed=0):
        """Learning-rate sweep with Adam fixed (three cells)."""
        return cls("exploitation", {"learning_rate": [1e-3, 1e-4, 1e-5]},
                   {"optimizer": "adam", "epochs": epochs, "batch_size": batch_size}, seed=seed)


@dataclass
class RunResult:
    cell_id: int
    cell: dict
    loss_curve: list
    report: EvalReport | None = None
    error: str | None = None
    wall_time: float = 0.0

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_cell(cell_id, cell, spec: GridSpec, cfg, train_data, val_data, class_names):
    tc = spec.train_config(cell)
    started = time.perf_counter()
    curve = []
    try:
        weights = init_weights(cfg, spec.seed)
        weights, curve = train(cfg, weights, train_data, tc)
        report = evaluate_model(Network(cfg, weights), val_data, class_names, spec.thresholds)
        return RunResult(cell_id, cell, curve, report, None, time.perf_counter() - started)
    except (TinyDetError, EvaluationError, ValueError, FloatingPointError) as e:
        log.error("grid cell %d %s failed: %s", cell_id, cell, e)
        return RunResult(cell_id, cell, curve, None, str(e), time.perf_counter() - started)


def run_grid(spec: GridSpec, cfg: NetConfig, train_data, val_data, class_names, on_cell=None):
    """Train and evaluate every cell with the same seed and data."""
    results = []
    for cell_id, cell in enumerate(spec.cells(), start=1):
        result = run_cell(cell_id, cell, spec, cfg, train_data, val_data, class_names)
        results.append(result)
        if on_cell is not None:
            on_cell(result)
    return results


def _fmt_level(name, value):
    if name == "learning_rate":
        return f"{value:.0e}".replace("e-0", "e-")
    if name == "optimizer":
        return str(value).upper()
    return str(value)


def render_grid_table(spec: GridSpec, results) -> str:
    """Markdown comparison table: factors, thresholds, orthogonal fields, metrics."""
    factors = list(spec.factors)
    fixed = [k for k in ("optimizer", "epochs", "batch_size") if k in spec.orthogonal]
    header = (["ID"] + [FACTOR_LABELS[f] for f in factors] + ["Score", "IOU"]
              + [FACTOR_LABELS[f] for f in fixed]
              + ["Accuracy", "Precision", "Recall", "F1-score", "Average IOU", "Label Not detected"])
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in results:
        row = [str(r.cell_id)] + [_fmt_level(f, r.cell[f]) for f in factors]
        row += [f"{spec.thresholds.score_min:g}", f"{spec.thresholds.iou_min:g}"]
        row += [_fmt_level(f, r.cell[f]) for f in fixed]
        if r.report is not None:
            row += report_cells(r.report)
        else:
            row += ["failed"] * 6
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
