import numpy as np
import pytest

from lowbit.netdesc import NetParseError, load_net, parse_net


def test_parse_toy(toy_fp32):
    g, blobs = toy_fp32
    assert [l.kind for l in g.layers] == ["conv2d", "relu", "conv2d", "relu", "conv2d", "relu", "dense"]
    assert g.layer("c3").params["stride"] == (2, 2)
    assert g.layer("fc").params["in_features"] == 8 * 4 * 4
    assert blobs["c1.weight"].shape == (8, 3, 3, 3)
    assert blobs["fc.weight"].shape == (10, 128)


def test_seeded_weights_deterministic():
    text = "input 1 4\nweights seed=9\ndense d out=3\n"
    a, b = parse_net(text)[1], parse_net(text)[1]
    assert all(np.array_equal(a[k], b[k]) for k in a)
    bound = np.sqrt(6 / 4)
    assert np.abs(a["d.weight"]).max() <= bound
    c = parse_net(text.replace("9", "10"))[1]
    assert not np.array_equal(a["d.weight"], c["d.weight"])


def test_bias_false_and_skip():
    g, blobs = parse_net("input 1 2 4 4\nconv2d a out=2 kernel=1 bias=false\nrelu r\nadd s other=a\nmaxpool2d p window=2\n")
    assert g.layer("a").bias is None and "a.bias" not in blobs
    assert g.layer("s").other == "a"
    assert g.layer("p").params == {"window": (2, 2), "stride": (2, 2)}


def test_weights_file(tmp_path):
    np.savez(tmp_path / "w.npz", **{"d.weight": np.ones((3, 4), np.float32), "d.bias": np.zeros(3, np.float32)})
    (tmp_path / "net.txt").write_text("input 1 4\nweights file=w.npz\ndense d out=3\n")
    g, blobs = load_net(tmp_path / "net.txt")
    assert np.array_equal(blobs["d.weight"], np.ones((3, 4)))


@pytest.mark.parametrize(
    "text,line,col",
    [
        ("input 1 3 8 8\nconv2d c kernel=3\n", 2, 18),
        ("input 1 3 8 8\nconv2d c out=x kernel=3\n", 2, 14),
        ("input 1 3 8 8\nbogus c\n", 2, 1),
        ("relu r\n", 1, 1),
        ("input 1 3 8 8\nrelu r\nrelu r\n", 3, 6),
        ("input 1 3 8 8\nrelu r\nadd s other=zz\n", 3, 13),
        ("input 1 3 8 8\nconv2d c out=4 kernel=3 colour=red\n", 2, 25),
        ("input 1 3 2 2\nconv2d c out=4 kernel=3\n", 2, 8),
    ],
)
def test_positioned_errors(text, line, col):
    with pytest.raises(NetParseError) as ei:
        parse_net(text)
    assert (ei.value.line, ei.value.col) == (line, col)
    assert f"line {line}, column {col}" in str(ei.value)
