import numpy as np
import pytest

from dptomo import io


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.complex64, np.complex128])
def test_tensor_roundtrip_bitwise(tmp_path, dtype):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4, 5)).astype(dtype)
    if np.iscomplexobj(a):
        a = a + 1j * rng.standard_normal(a.shape).astype(a.real.dtype)
    p = tmp_path / "t.dpt"
    io.write_tensor(p, a, units="rad/um", meta={"k": 1})
    b, h = io.read_tensor(p, with_header=True)
    assert b.dtype == a.dtype and b.shape == a.shape
    assert a.tobytes() == b.tobytes()
    assert h["units"] == "rad/um" and h["meta"] == {"k": 1}


def test_header_is_deterministic(tmp_path):
    a = np.arange(4.0)
    io.write_tensor(tmp_path / "a", a, meta={"b": 1, "a": 2})
    io.write_tensor(tmp_path / "b", a, meta={"a": 2, "b": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "x.dpt"
    p.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(io.ContainerError, match="magic"):
        io.read_tensor(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "x.dpt"
    io.write_tensor(p, np.zeros((4, 4)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(io.ContainerError, match="payload"):
        io.read_tensor(p)


def test_unsupported_dtype(tmp_path):
    with pytest.raises(io.ContainerError):
        io.write_tensor(tmp_path / "x", np.array(["a"]))


def test_led_stack_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    s = io.LedStack(rng.random((5, 6, 6)), rng.standard_normal((5, 3)), "a.u.", {"model": "born"})
    s.save(tmp_path / "stack")
    t = io.LedStack.load(tmp_path / "stack")
    assert np.array_equal(s.images, t.images) and np.array_equal(s.kill, t.kill)
    assert t.meta == {"model": "born"}
    sub = t.subset([0, 2])
    assert sub.n_leds == 2 and np.array_equal(sub.images[1], s.images[2])


def test_led_stack_missing_and_mismatch(tmp_path):
    with pytest.raises(FileNotFoundError):
        io.LedStack.load(tmp_path)
    with pytest.raises(ValueError):
        io.LedStack(np.zeros((3, 4, 4)), np.zeros((2, 3)))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {"volume": rng.standard_normal((4, 4, 4)) + 1j, "u0": rng.random(7)}
    io.save_checkpoint(tmp_path / "ck", arrays, {"iteration": 50})
    back, meta = io.load_checkpoint(tmp_path / "ck")
    assert list(back) == list(arrays)
    for k in arrays:
        assert arrays[k].tobytes() == back[k].tobytes()
    assert meta == {"iteration": 50}
