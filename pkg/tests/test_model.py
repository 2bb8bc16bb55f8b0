import numpy as np
import pytest

from dropclass import model as M
from dropclass.errors import ConfigError, FormatError
from dropclass.graph import Graph

CFG = M.ModelConfig(n_classes=6)
SMALL = M.ModelConfig(n_classes=4, widths=(6, 8), feature_channels=8,
                      expected_resolution=16)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def test_init_deterministic_per_seed():
    a = M.init_model(CFG, seed=3)
    b = M.init_model(CFG, seed=3)
    c = M.init_model(CFG, seed=4)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    assert not np.array_equal(a.params["conv0_kernel"], c.params["conv0_kernel"])


def test_init_kaiming_std():
    # conv1: 3x3x16 fan-in, 4608 weights, enough for a tight sample std
    m = M.init_model(CFG, seed=0)
    w = m.params["conv1_kernel"]
    assert w.shape == (3, 3, 16, 32)
    expected = np.sqrt(2.0 / (3 * 3 * 16))
    assert abs(w.std() - expected) < 0.2 * expected
    assert abs(w.mean()) < 0.1 * expected


def test_init_biases_zero():
    m = M.init_model(CFG, seed=1)
    for name, arr in m.params.items():
        if name.endswith("_bias"):
            assert not arr.any(), name


def test_init_comp_kernel_diagonal():
    m = M.init_model(CFG, seed=0)
    comp = m.params["comp_kernel"]
    k = CFG.feature_channels
    assert comp.shape == (1, 1, k, k)
    diag = comp[0, 0, np.arange(k), np.arange(k)]
    assert (diag > 0).all()
    off = comp[0, 0].copy()
    off[np.arange(k), np.arange(k)] = 0
    assert not off.any()


def test_param_shapes_complete():
    shapes = M.param_shapes(CFG)
    assert shapes["conv0_kernel"] == (3, 3, 3, 16)
    assert shapes["classifier_kernel"] == (1, 1, 32, 6)
    assert shapes["classifier_bias"] == (6,)
    assert set(M.param_order(CFG)) == set(shapes)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def test_forward_shapes():
    m = M.init_model(SMALL, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)
    a, logits = M.forward(m, x)
    assert a.shape == (2, 16, 16, 8)
    assert logits.shape == (2, 16, 16, 4)
    assert (a >= 0).all()  # post-relu features


def test_extract_then_classify_matches_forward():
    m = M.init_model(SMALL, seed=2)
    x = np.random.default_rng(1).uniform(0, 1, (1, 16, 16, 3)).astype(np.float32)
    a, logits = M.forward(m, x)
    assert np.array_equal(M.extract_features(m, x), a)
    assert np.array_equal(M.classify(m, a), logits)


def test_classifier_is_linear_in_features():
    # 1x1 classifier head: classify(a1 + a2) == classify(a1) + classify(a2) - bias
    m = M.init_model(SMALL, seed=3)
    rng = np.random.default_rng(2)
    a1 = rng.uniform(0, 1, (1, 8, 8, 8)).astype(np.float32)
    a2 = rng.uniform(0, 1, (1, 8, 8, 8)).astype(np.float32)
    lhs = M.classify(m, a1 + a2)
    rhs = M.classify(m, a1) + M.classify(m, a2) - m.params["classifier_bias"]
    assert np.abs(lhs - rhs).max() < 1e-4


def test_forward_graph_exposes_param_gradients():
    m = M.init_model(SMALL, seed=4)
    g = Graph()
    nodes = M.param_nodes(g, m)
    x = np.random.default_rng(3).uniform(0, 1, (1, 16, 16, 3)).astype(np.float32)
    _, logits = M.forward_graph(g, nodes, m.config, x)
    grads = g.backward(g.sum(logits))
    pg = g.param_grads(grads)
    for name in ("conv0_kernel", "classifier_kernel", "classifier_bias"):
        assert pg[nodes[name].id].any(), name
    # comp_kernel is not on the plain forward path
    assert not pg[nodes["comp_kernel"].id].any()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    m = M.init_model(SMALL, seed=5)
    p = tmp_path / "m.dcm1"
    M.save_checkpoint(m, p)
    back = M.load_checkpoint(p)
    assert back.config == m.config
    assert set(back.params) == set(m.params)
    for name in m.params:
        assert np.array_equal(back.params[name], m.params[name]), name


def test_checkpoint_class_count_guard(tmp_path):
    m = M.init_model(SMALL, seed=6)
    p = tmp_path / "m.dcm1"
    M.save_checkpoint(m, p)
    assert M.load_checkpoint(p, n_classes=4).config.n_classes == 4
    with pytest.raises(ConfigError, match="4 classes"):
        M.load_checkpoint(p, n_classes=7)


def test_checkpoint_truncation_detected(tmp_path):
    m = M.init_model(SMALL, seed=7)
    p = tmp_path / "m.dcm1"
    M.save_checkpoint(m, p)
    blob = p.read_bytes()
    clipped = tmp_path / "clipped.dcm1"
    clipped.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError, match="truncated"):
        M.load_checkpoint(clipped)


def test_checkpoint_trailing_garbage_detected(tmp_path):
    m = M.init_model(SMALL, seed=8)
    p = tmp_path / "m.dcm1"
    M.save_checkpoint(m, p)
    p.write_bytes(p.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(FormatError, match="trailing"):
        M.load_checkpoint(p)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "m.dcm1"
    p.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        M.load_checkpoint(p)


def test_checkpoint_rejects_unknown_format_version(tmp_path):
    m = M.init_model(SMALL, seed=9)
    p = tmp_path / "m.dcm1"
    M.save_checkpoint(m, p)
    blob = bytearray(p.read_bytes())
    cfg_len = int.from_bytes(blob[4:8], "little")
    text = blob[8 : 8 + cfg_len].decode()
    blob[8 : 8 + cfg_len] = text.replace("format=1", "format=9").encode()
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="format"):
        M.load_checkpoint(p)


def test_config_validation():
    with pytest.raises(ConfigError):
        M.ModelConfig(n_classes=0)
    with pytest.raises(ConfigError):
        M.ModelConfig(n_classes=4, kernel_size=2)
    with pytest.raises(ConfigError):
        M.ModelConfig(n_classes=4, widths=())
    with pytest.raises(ConfigError, match="feature_channels"):
        M.ModelConfig(n_classes=4, widths=(8, 16), feature_channels=32)
