import logging
import struct

import numpy as np
import pytest

from oracles import offset_table
from tinydet.errors import ConfigError, WeightsError
from tinydet.netdef import (DEFAULT_ANCHORS, ConvParams, ModelWeights, compute_head_depth,
                            load_weights, parse_cfg, save_weights, zero_weights)


@pytest.mark.parametrize("classes,anchors,depth", [(6, 3, 33), (0, 1, 5), (80, 3, 255)])
def test_head_depth(classes, anchors, depth):
    assert compute_head_depth(classes, anchors) == depth


def test_minimal_single_conv():
    cfg = parse_cfg("[net] width=416 height=416 channels=3\n"
                    "[convolutional] filters=16 size=3 stride=1 pad=1 activation=leaky")
    assert len(cfg.layers) == 1 and cfg.layers[0].kind == "convolutional"
    assert cfg.shapes == [(16, 416, 416)]


def test_reference_graph_structure(ref_cfg):
    counts = {k: ref_cfg.count(k) for k in ("convolutional", "maxpool", "route", "upsample", "yolo")}
    assert counts == {"convolutional": 13, "maxpool": 6, "route": 2, "upsample": 1, "yolo": 2}
    yolos = ref_cfg.yolo_layers
    assert [ref_cfg.shapes[y.index - 1][0] for y in yolos] == [33, 33]
    assert [ref_cfg.shapes[y.index][1:] for y in yolos] == [(13, 13), (26, 26)]


def test_reference_graph_uses_default_anchors(ref_cfg):
    coarse, fine = ref_cfg.yolo_layers
    assert coarse.anchors == DEFAULT_ANCHORS and coarse.default_anchors
    assert coarse.mask == (3, 4, 5) and fine.mask == (0, 1, 2)


def test_default_anchor_notice(caplog):
    text = ("[net]\nwidth=32\nheight=32\n[convolutional]\nfilters=33\nsize=1\n"
            "[yolo]\nclasses=6\n")
    with caplog.at_level(logging.WARNING):
        cfg = parse_cfg(text)
    assert "default" in caplog.text
    assert cfg.yolo_layers[0].mask == (3, 4, 5)


def test_missing_net_section():
    with pytest.raises(ConfigError, match="first section must be net"):
        parse_cfg("[convolutional]\nfilters=4\nsize=3\n")


def test_unknown_section_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_cfg("[net]\nwidth=8\nheight=8\n\n[shortcut]\nfrom=-3\n")
    assert info.value.line == 5


def test_missing_mandatory_key_located():
    with pytest.raises(ConfigError) as info:
        parse_cfg("[net]\nwidth=8\nheight=8\n[convolutional]\nsize=3\n")
    assert "filters" in str(info.value)
    assert info.value.layer == 0 and info.value.line == 4


def test_head_depth_enforced():
    text = "[net]\nwidth=32\nheight=32\n[convolutional]\nfilters=30\nsize=1\n[yolo]\nmask=0,1,2\nanchors=1,1,2,2,3,3\nclasses=6\n"
    with pytest.raises(ConfigError, match="expected \\(5\\+6\\)\\*3 = 33"):
        parse_cfg(text)


def test_yolo_mask_out_of_range():
    text = "[net]\nwidth=32\nheight=32\n[convolutional]\nfilters=11\nsize=1\n[yolo]\nmask=4\nanchors=1,1\nclasses=6\n"
    with pytest.raises(ConfigError, match="mask"):
        parse_cfg(text)


def test_route_indices_relative_and_absolute():
    text = ("[net]\nwidth=16\nheight=16\n"
            "[convolutional]\nfilters=4\nsize=3\npad=1\n"
            "[convolutional]\nfilters=6\nsize=3\npad=1\n"
            "[route]\nlayers=-1, 0\n")
    cfg = parse_cfg(text)
    assert cfg.nodes[2].sources == (1, 0)
    assert cfg.shapes[2] == (10, 16, 16)


def test_route_spatial_mismatch():
    text = ("[net]\nwidth=16\nheight=16\n[convolutional]\nfilters=4\nsize=3\npad=1\n"
            "[maxpool]\nsize=2\nstride=2\n[route]\nlayers=-1,0\n")
    with pytest.raises(ConfigError, match="spatial"):
        parse_cfg(text)


def test_comments_blank_lines_and_unknown_keys(caplog):
    text = "# header\n[net]\n; note\nwidth = 8\n\nheight=8\nfancy=1\n[maxpool]\nsize=2\nstride=2\n"
    with caplog.at_level(logging.WARNING):
        cfg = parse_cfg(text)
    assert "fancy" in caplog.text
    assert cfg.shapes == [(3, 4, 4)]


@pytest.mark.parametrize("text", [
    "", "   \n", "[net]\nwidth=abc\nheight=3\n", "[net]\nwidth=4\nheight=4\n[net]\n",
    "[net]\nwidth=4\nheight=4\n[convolutional]\nfilters=2\nsize=9\n",
    "[net]\nwidth=4\nheight=4\n[yolo]\nclasses=1\n",
    "[net]\nwidth=4\nheight=4\n[route]\nlayers=3\n",
    "[net]\nwidth=4\nheight=4\n[convolutional]\nfilters=2\nsize=1\nactivation=mish\n",
    "width=3\n",
])
def test_malformed_inputs_raise_config_error(text):
    with pytest.raises(ConfigError):
        parse_cfg(text)


def test_maxpool_same_size_pool(ref_cfg):
    # size 2 stride 1 keeps 13x13
    assert ref_cfg.shapes[11] == (512, 13, 13)


# weights ---------------------------------------------------------------------------

def _random_weights(cfg, rng):
    w = zero_weights(cfg)
    for p in w.convs.values():
        for a in p.arrays():
            a[...] = rng.standard_normal(a.shape).astype(np.float32)
        if p.batch_normalize:
            p.rolling_variance[...] = np.abs(p.rolling_variance)
    w.images_seen = 123456789012
    return w


def test_single_layer_blob_size():
    cfg = parse_cfg("[net]\nwidth=8\nheight=8\n[convolutional]\nbatch_normalize=1\nfilters=16\nsize=3\npad=1\n")
    assert cfg.param_count == 496
    assert len(save_weights(zero_weights(cfg))) == 20 + 4 * 496


def test_empty_model_is_header_only():
    data = save_weights(ModelWeights())
    assert len(data) == 20
    assert struct.unpack("<iiiq", data) == (0, 2, 0, 0)


def test_round_trip_byte_identical(micro, rng):
    w = _random_weights(micro, rng)
    data = save_weights(w)
    loaded = load_weights(data, micro)
    assert loaded == w
    assert save_weights(loaded) == data


def _random_cfg(rng):
    lines = [f"[net]\nwidth={int(rng.integers(8, 20))}\nheight={int(rng.integers(8, 20))}\nchannels={int(rng.integers(1, 4))}"]
    defs = []
    c = None
    for _ in range(int(rng.integers(1, 5))):
        bn = int(rng.integers(0, 2))
        f = int(rng.integers(1, 6))
        k = int(rng.choice([1, 3]))
        lines.append(f"[convolutional]\nbatch_normalize={bn}\nfilters={f}\nsize={k}\npad=1")
        if rng.random() < 0.4:
            lines.append("[maxpool]\nsize=2\nstride=1")
        defs.append([None, f, c, k, bool(bn)])
        c = f
    return "\n".join(lines) + "\n", defs


def test_parameters_land_at_oracle_offsets(rng):
    for _ in range(10):
        text, defs = _random_cfg(rng)
        cfg = parse_cfg(text)
        convs = cfg.conv_layers
        for d, node in zip(defs, convs):
            d[0], d[2] = node.index, node.in_c
        table, total = offset_table([tuple(d) for d in defs])
        body = rng.standard_normal(total).astype("<f4")
        data = struct.pack("<iiiq", 0, 2, 0, 7) + body.tobytes()
        w = load_weights(data, cfg)
        for (layer, slot, q), pos in table.items():
            arr = getattr(w.convs[layer], slot).ravel()
            assert arr[q] == body[pos]


def test_reference_file_size(ref_cfg):
    defs = [(c.index, c.filters, c.in_c, c.size, c.batch_normalize) for c in ref_cfg.conv_layers]
    _, total = offset_table(defs)
    assert len(save_weights(zero_weights(ref_cfg))) == 20 + 4 * total


def test_length_mismatch_reports_counts(micro):
    data = save_weights(zero_weights(micro))
    with pytest.raises(WeightsError, match=f"expected {micro.param_count} floats"):
        load_weights(data[:-4], micro)
    with pytest.raises(WeightsError, match="trailing"):
        load_weights(data + b"\0\0\0\0", micro)


def test_old_header_rejected(micro):
    data = bytearray(save_weights(zero_weights(micro)))
    struct.pack_into("<ii", data, 0, 0, 1)
    with pytest.raises(WeightsError, match="16-byte"):
        load_weights(bytes(data), micro)


def test_save_load_save_fixed_point(micro, rng):
    for _ in range(5):
        data = save_weights(_random_weights(micro, rng))
        assert save_weights(load_weights(data, micro)) == data


def test_conv_params_equality_detects_change():
    p = ConvParams(np.zeros((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    q = p.copy()
    assert p == q
    q.biases[0] = 1
    assert p != q
