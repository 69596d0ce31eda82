"""Layer-graph text parsing, shape inference and the binary weights codec.

The graph format is the INI-like darknet layout::

    [net]
    width=416
    height=416
    channels=3

    [convolutional]
    batch_normalize=1
    filters=16
    size=3
    ...

Layer indices exclude the ``[net]`` section, so the first section after it is
layer 0. Route ``layers`` entries that are negative are relative to the route
itself; non-negative entries are absolute layer indices.
"""
from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, WeightsError

log = logging.getLogger(__name__)

DEFAULT_ANCHORS = ((10, 14), (23, 27), (37, 58), (81, 82), (135, 169), (344, 319))
DEFAULT_MASKS = ((3, 4, 5), (0, 1, 2))  # coarse scale first
ACTIVATIONS = ("leaky", "linear")

HEADER = struct.Struct("<iiiq")
HEADER_BYTES = HEADER.size  # 20

_KIND_ALIASES = {
    "net": "net",
    "network": "net",
    "convolutional": "convolutional",
    "conv": "convolutional",
    "maxpool": "maxpool",
    "max": "maxpool",
    "upsample": "upsample",
    "route": "route",
    "yolo": "yolo",
}

# Keys that are understood (or deliberately ignored) per section kind.
_KNOWN_KEYS = {
    "net": {
        "width", "height", "channels", "batch", "subdivisions", "momentum", "decay",
        "angle", "saturation", "exposure", "hue", "learning_rate", "burn_in",
        "max_batches", "policy", "steps", "scales",
    },
    "convolutional": {"filters", "size", "stride", "pad", "padding", "batch_normalize", "activation"},
    "maxpool": {"size", "stride", "padding"},
    "upsample": {"stride"},
    "route": {"layers"},
    "yolo": {
        "mask", "anchors", "classes", "num", "jitter", "ignore_thresh",
        "truth_thresh", "random",
    },
}

_PAIR = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*=\s*")
_HEADER_RE = re.compile(r"^\[\s*([A-Za-z_]+)\s*\](.*)$")


def compute_head_depth(n_classes: int, n_anchors_per_scale: int) -> int:
    """Channel count of a detection head: ``(5 + n_classes) * n_anchors_per_scale``."""
    return (5 + n_classes) * n_anchors_per_scale


@dataclass
class LayerSpec:
    """One ``[kind]`` section with its raw ``key=value`` strings."""

    kind: str
    params: dict = field(default_factory=dict)
    line: int | None = None
    index: int | None = None  # None for the net section

    def _fail(self, msg):
        raise ConfigError(msg, line=self.line, layer=self.index)

    def get_str(self, key, default=None, required=False):
        if key in self.params:
            return self.params[key]
        if required:
            self._fail(f"[{self.kind}] missing mandatory key '{key}'")
        return default

    def get_int(self, key, default=None, required=False):
        raw = self.get_str(key, default, required)
        if raw is None or isinstance(raw, int):
            return raw
        try:
            return int(raw)
        except ValueError:
            self._fail(f"[{self.kind}] key '{key}' expects an integer, got '{raw}'")

    def get_float(self, key, default=None):
        raw = self.get_str(key, default)
        if raw is None or isinstance(raw, float):
            return raw
        try:
            return float(raw)
        except ValueError:
            self._fail(f"[{self.kind}] key '{key}' expects a number, got '{raw}'")

    def get_list(self, key, cast=int, required=False):
        raw = self.get_str(key, None, required)
        if raw is None:
            return None
        try:
            return [cast(v) for v in raw.split(",") if v.strip()]
        except ValueError:
            self._fail(f"[{self.kind}] key '{key}' has a malformed list '{raw}'")


# Resolved layer definitions -------------------------------------------------

@dataclass(frozen=True)
class ConvLayer:
    index: int
    in_c: int
    filters: int
    size: int
    stride: int
    pad: int
    batch_normalize: bool
    activation: str

    @property
    def param_count(self) -> int:
        k = self.filters * self.in_c * self.size * self.size
        return k + (4 if self.batch_normalize else 1) * self.filters


@dataclass(frozen=True)
class MaxPoolLayer:
    index: int
    size: int
    stride: int
    padding: int  # total padding; windows start at -padding // 2


@dataclass(frozen=True)
class UpsampleLayer:
    index: int
    stride: int


@dataclass(frozen=True)
class RouteLayer:
    index: int
    sources: tuple


@dataclass(frozen=True)
class YoloLayer:
    index: int
    classes: int
    mask: tuple
    anchors: tuple  # all (w, h) pairs in input pixels
    ignore_thresh: float = 0.5
    default_anchors: bool = False

    @property
    def slot_anchors(self):
        """Anchor (w, h) pairs for this head's slots, in mask order."""
        return tuple(self.anchors[m] for m in self.mask)

    @property
    def depth(self) -> int:
        return compute_head_depth(self.classes, len(self.mask))


@dataclass
class NetConfig:
    """Parsed network graph with inferred per-layer output shapes.

    ``layers`` excludes the net section (kept in ``net``) so list positions are
    layer indices. ``nodes[i]`` is the resolved definition of layer ``i`` and
    ``shapes[i]`` its output (c, h, w).
    """

    net: LayerSpec
    layers: list
    nodes: list
    shapes: list
    input_w: int
    input_h: int
    input_c: int

    @property
    def input_shape(self):
        return (self.input_c, self.input_h, self.input_w)

    @property
    def conv_layers(self):
        return [n for n in self.nodes if isinstance(n, ConvLayer)]

    @property
    def yolo_layers(self):
        return [n for n in self.nodes if isinstance(n, YoloLayer)]

    @property
    def classes(self) -> int:
        yolos = self.yolo_layers
        return yolos[0].classes if yolos else 0

    def count(self, kind: str) -> int:
        return sum(1 for spec in self.layers if spec.kind == kind)

    @property
    def param_count(self) -> int:
        return sum(c.param_count for c in self.conv_layers)


def _split_pairs(text, spec):
    """Yield (key, value) from ``text``; values lose all internal whitespace."""
    matches = list(_PAIR.finditer(text))
    if not matches:
        if text.strip():
            raise ConfigError(f"expected key=value, got '{text.strip()}'", line=spec.line if spec else None)
        return
    if text[: matches[0].start()].strip():
        raise ConfigError(f"unexpected text '{text[: matches[0].start()].strip()}'",
                          line=spec.line if spec else None)
    for m, nxt in zip(matches, matches[1:] + [None]):
        end = nxt.start() if nxt is not None else len(text)
        yield m.group(1), "".join(text[m.end():end].split())


def _read_sections(text):
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        header = _HEADER_RE.match(line)
        if header:
            name = header.group(1).lower()
            kind = _KIND_ALIASES.get(name)
            if kind is None:
                raise ConfigError(f"unknown section kind '[{name}]'", line=lineno, layer=max(len(sections) - 1, 0))
            current = LayerSpec(kind=kind, line=lineno)
            sections.append(current)
            rest = header.group(2)
        else:
            if current is None:
                raise ConfigError("first section must be net", line=lineno)
            rest = line
        for key, value in _split_pairs(rest, LayerSpec("?", line=lineno)):
            current.params[key.lower()] = value
    return sections


def parse_cfg(text: str) -> NetConfig:
    """Parse graph text into a :class:`NetConfig` and run shape inference."""
    if not text or not text.strip():
        raise ConfigError("empty network definition")
    sections = _read_sections(text)
    if not sections or sections[0].kind != "net":
        raise ConfigError("first section must be net", line=sections[0].line if sections else None)
    net, layers = sections[0], sections[1:]
    for i, spec in enumerate(layers):
        spec.index = i
        if spec.kind == "net":
            raise ConfigError("net section must appear exactly once", line=spec.line, layer=i)
    for spec in sections:
        unknown = set(spec.params) - _KNOWN_KEYS[spec.kind]
        for key in sorted(unknown):
            log.warning("ignoring unknown key '%s' in [%s] at line %s", key, spec.kind, spec.line)

    input_w = net.get_int("width", required=True)
    input_h = net.get_int("height", required=True)
    input_c = net.get_int("channels", 3)
    if min(input_w, input_h, input_c) < 1:
        raise ConfigError("net width, height and channels must be >= 1", line=net.line)

    n_yolo = sum(1 for s in layers if s.kind == "yolo")
    nodes, shapes = [], []
    prev = (input_c, input_h, input_w)
    yolo_seen = 0
    for i, spec in enumerate(layers):
        if spec.kind == "convolutional":
            node, out = _infer_conv(spec, prev)
        elif spec.kind == "maxpool":
            node, out = _infer_maxpool(spec, prev)
        elif spec.kind == "upsample":
            stride = spec.get_int("stride", 2)
            if stride < 1:
                spec._fail("upsample stride must be >= 1")
            node, out = UpsampleLayer(i, stride), (prev[0], prev[1] * stride, prev[2] * stride)
        elif spec.kind == "route":
            node, out = _infer_route(spec, shapes)
        else:
            if i == 0:
                spec._fail("yolo layer needs a predecessor")
            node = _infer_yolo(spec, prev, yolo_seen, n_yolo)
            out = prev
            yolo_seen += 1
        nodes.append(node)
        shapes.append(out)
        prev = out
    return NetConfig(net, layers, nodes, shapes, input_w, input_h, input_c)


def _infer_conv(spec, prev):
    filters = spec.get_int("filters", required=True)
    size = spec.get_int("size", required=True)
    stride = spec.get_int("stride", 1)
    if filters < 1 or size < 1 or stride < 1:
        spec._fail("convolutional requires filters >= 1, size >= 1, stride >= 1")
    if spec.get_int("pad", 0):
        pad = size // 2
    else:
        pad = spec.get_int("padding", 0)
    activation = spec.get_str("activation", "linear")
    if activation not in ACTIVATIONS:
        spec._fail(f"unsupported activation '{activation}'")
    c, h, w = prev
    oh = (h + 2 * pad - size) // stride + 1
    ow = (w + 2 * pad - size) // stride + 1
    if oh < 1 or ow < 1:
        spec._fail(f"convolution output would be {oh}x{ow} for input {h}x{w}")
    node = ConvLayer(spec.index, c, filters, size, stride, pad,
                     bool(spec.get_int("batch_normalize", 0)), activation)
    return node, (filters, oh, ow)


def _infer_maxpool(spec, prev):
    size = spec.get_int("size", 1)
    stride = spec.get_int("stride", 1)
    padding = spec.get_int("padding", size - 1)
    if size < 1 or stride < 1 or padding < 0 or (padding + 1) // 2 > size - 1:
        spec._fail(f"invalid maxpool geometry size={size} stride={stride} padding={padding}")
    c, h, w = prev
    oh = (h + padding - size) // stride + 1
    ow = (w + padding - size) // stride + 1
    if oh < 1 or ow < 1:
        spec._fail(f"maxpool output would be {oh}x{ow} for input {h}x{w}")
    return MaxPoolLayer(spec.index, size, stride, padding), (c, oh, ow)


def _infer_route(spec, shapes):
    i = spec.index
    refs = spec.get_list("layers", int, required=True)
    if not refs:
        spec._fail("route needs at least one source layer")
    sources = []
    for r in refs:
        src = i + r if r < 0 else r
        if not 0 <= src < i:
            spec._fail(f"route source {r} resolves to layer {src}, outside 0..{i - 1}")
        sources.append(src)
    hw = {shapes[s][1:] for s in sources}
    if len(hw) != 1:
        spec._fail(f"route inputs disagree on spatial size: {sorted(hw)}")
    h, w = hw.pop()
    return RouteLayer(i, tuple(sources)), (sum(shapes[s][0] for s in sources), h, w)


def _infer_yolo(spec, prev, ordinal, n_yolo):
    classes = spec.get_int("classes", required=True)
    if classes < 1:
        spec._fail("yolo requires classes >= 1")
    raw_anchors = spec.get_list("anchors", float)
    default = raw_anchors is None
    if default:
        anchors = DEFAULT_ANCHORS
        log.warning("yolo layer %d has no anchors; using the built-in tiny defaults %s",
                    spec.index, DEFAULT_ANCHORS)
    else:
        if not raw_anchors or len(raw_anchors) % 2:
            spec._fail("anchors must be a non-empty list of (w, h) pairs")
        anchors = tuple(zip(raw_anchors[0::2], raw_anchors[1::2]))
    mask = spec.get_list("mask", int)
    if mask is None:
        if default:
            if ordinal >= len(DEFAULT_MASKS) or n_yolo > len(DEFAULT_MASKS):
                spec._fail("no default mask for more than two yolo scales")
            mask = list(DEFAULT_MASKS[ordinal])
        else:
            mask = list(range(len(anchors)))
    if not mask or any(not 0 <= m < len(anchors) for m in mask):
        spec._fail(f"mask {mask} must select >= 1 anchor index in 0..{len(anchors) - 1}")
    num = spec.get_int("num")
    if num is not None and num != len(anchors):
        spec._fail(f"num={num} disagrees with {len(anchors)} anchors")
    expected = compute_head_depth(classes, len(mask))
    if prev[0] != expected:
        spec._fail(
            f"yolo predecessor has {prev[0]} channels, expected "
            f"(5+{classes})*{len(mask)} = {expected}"
        )
    return YoloLayer(spec.index, classes, tuple(mask), tuple(anchors),
                     spec.get_float("ignore_thresh", 0.5), default)


def load_cfg(path) -> NetConfig:
    return parse_cfg(Path(path).read_text())


def bundled_path(name: str) -> Path:
    """Path of a file shipped in the package ``data`` directory."""
    return Path(str(resources.files("tinydet") / "data" / name))


def reference_cfg() -> NetConfig:
    """The 6-class two-scale tiny graph at 416x416."""
    return load_cfg(bundled_path("yolov3-tiny-ripeness.cfg"))


def micro_cfg() -> NetConfig:
    """Desk-scale single-head detector used by training experiments."""
    return load_cfg(bundled_path("micro-detector.cfg"))


# Weights --------------------------------------------------------------------

@dataclass
class ConvParams:
    """Parameters of one convolutional layer.

    Without batch norm, ``biases`` is the additive bias and the three
    batch-norm arrays are ``None``. With batch norm, ``biases`` is the beta
    shift applied after normalization.
    """

    weights: np.ndarray  # (out_c, in_c, k, k)
    biases: np.ndarray
    scales: np.ndarray | None = None
    rolling_mean: np.ndarray | None = None
    rolling_variance: np.ndarray | None = None

    @property
    def batch_normalize(self) -> bool:
        return self.scales is not None

    def arrays(self):
        """Arrays in file order."""
        out = [self.biases]
        if self.batch_normalize:
            out += [self.scales, self.rolling_mean, self.rolling_variance]
        out.append(self.weights)
        return out

    def astype(self, dtype) -> ConvParams:
        cast = lambda a: None if a is None else np.array(a, dtype=dtype)  # noqa: E731
        return ConvParams(cast(self.weights), cast(self.biases), cast(self.scales),
                          cast(self.rolling_mean), cast(self.rolling_variance))

    def copy(self) -> ConvParams:
        return self.astype(self.weights.dtype)

    def __eq__(self, other):
        if not isinstance(other, ConvParams):
            return NotImplemented
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs)
        )


@dataclass
class ModelWeights:
    """Header fields plus one :class:`ConvParams` per convolutional layer index."""

    convs: dict = field(default_factory=dict)
    major: int = 0
    minor: int = 2
    revision: int = 0
    images_seen: int = 0

    def astype(self, dtype) -> ModelWeights:
        return ModelWeights({i: p.astype(dtype) for i, p in self.convs.items()},
                            self.major, self.minor, self.revision, self.images_seen)

    def copy(self) -> ModelWeights:
        return ModelWeights({i: p.copy() for i, p in self.convs.items()},
                            self.major, self.minor, self.revision, self.images_seen)

    @property
    def header(self):
        return (self.major, self.minor, self.revision, self.images_seen)

    def __eq__(self, other):
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return (self.header == other.header and list(self.convs) == list(other.convs)
                and all(self.convs[i] == other.convs[i] for i in self.convs))


def zero_weights(cfg: NetConfig, dtype=np.float32) -> ModelWeights:
    """All-zero parameters except rolling variance, which is 1."""
    convs = {}
    for c in cfg.conv_layers:
        z = lambda: np.zeros(c.filters, dtype=dtype)  # noqa: E731
        convs[c.index] = ConvParams(
            np.zeros((c.filters, c.in_c, c.size, c.size), dtype=dtype), z(),
            *((z(), z(), np.ones(c.filters, dtype=dtype)) if c.batch_normalize else ()),
        )
    return ModelWeights(convs)


def load_weights(data: bytes, cfg: NetConfig) -> ModelWeights:
    """Decode a weights blob laid out for ``cfg``.

    Header: little-endian major i32, minor i32, revision i32, images_seen i64.
    Then per conv layer: biases, [scales, rolling_mean, rolling_variance],
    kernel weights in out_c -> in_c -> kh -> kw order, all little-endian f32.
    """
    if len(data) < HEADER_BYTES:
        raise WeightsError(f"weights blob has {len(data)} bytes, shorter than the 20-byte header")
    major, minor, revision, seen = HEADER.unpack_from(data, 0)
    if major * 10 + minor < 2:
        raise WeightsError(f"unsupported weights version {major}.{minor} (16-byte header variant)")
    expected = cfg.param_count
    body = len(data) - HEADER_BYTES
    if body % 4 or body // 4 != expected:
        kind = "trailing bytes" if body > 4 * expected else "length mismatch"
        raise WeightsError(
            f"weights {kind}: expected {expected} floats ({HEADER_BYTES + 4 * expected} bytes), "
            f"got {body / 4:g} floats ({len(data)} bytes)"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=HEADER_BYTES).astype(np.float32)
    pos = 0

    def take(n, shape=None):
        nonlocal pos
        out = flat[pos:pos + n].copy()
        pos += n
        return out.reshape(shape) if shape else out

    convs = {}
    for c in cfg.conv_layers:
        biases = take(c.filters)
        bn = [take(c.filters) for _ in range(3)] if c.batch_normalize else []
        weights = take(c.filters * c.in_c * c.size * c.size, (c.filters, c.in_c, c.size, c.size))
        convs[c.index] = ConvParams(weights, biases, *bn)
    return ModelWeights(convs, major, minor, revision, seen)


def save_weights(weights: ModelWeights) -> bytes:
    """Encode ``weights``; inverse of :func:`load_weights`."""
    parts = [HEADER.pack(weights.major, weights.minor, weights.revision, weights.images_seen)]
    for index in sorted(weights.convs):
        for arr in weights.convs[index].arrays():
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def read_weights(path, cfg: NetConfig) -> ModelWeights:
    return load_weights(Path(path).read_bytes(), cfg)


def write_weights(path, weights: ModelWeights) -> None:
    Path(path).write_bytes(save_weights(weights))
