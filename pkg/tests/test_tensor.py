"""Tensor container, tape mechanics and the .d2t file format."""

import io

import numpy as np
import pytest

from d2mlp import ShapeError, Tape, Tensor, backward, ops
from d2mlp.tensor import load_d2t, read_d2t, save_d2t, write_d2t


class TestTensor:
    def test_rejects_unsupported_dtype(self):
        with pytest.raises(TypeError):
            Tensor(np.zeros(3, dtype=np.int32))

    def test_rejects_zero_extent(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0, 3), dtype=np.float32))

    def test_u8_cannot_require_grad(self):
        with pytest.raises(TypeError):
            Tensor(np.zeros(3, dtype=np.uint8), requires_grad=True)

    def test_item_requires_single_element(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2))).item()

    def test_uids_unique(self):
        a, b = Tensor(np.zeros(1)), Tensor(np.zeros(1))
        assert a.uid != b.uid


class TestTapeBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = ops.tsum(x)
        grads = backward(tape, loss)
        assert np.array_equal(grads[x.uid], np.ones((3, 4)))

    def test_elementwise_product_gradients(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        with Tape() as tape:
            loss = ops.tsum(ops.mul(a, b))
        grads = backward(tape, loss)
        assert np.allclose(grads[a.uid], b.data)
        assert np.allclose(grads[b.uid], a.data)

    def test_loss_must_be_scalar(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, 2.0)
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = ops.tsum(ops.add(x, x))
        grads = backward(tape, loss)
        assert np.array_equal(grads[x.uid], 2 * np.ones(3))

    def test_nodes_topologically_ordered(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, 3.0)
            z = ops.add(y, x)
            ops.tsum(z)
        produced = [n.out for n in tape.nodes]
        assert produced == sorted(produced)
        for node in tape.nodes:
            for uid in node.inputs:
                assert uid < node.out or uid not in produced


class TestD2TFormat:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8])
    def test_roundtrip_bit_exact(self, tmp_path, dtype):
        rng = np.random.default_rng(7)
        if dtype is np.uint8:
            arr = rng.integers(0, 256, (3, 5, 2), dtype=np.uint8)
        else:
            arr = rng.standard_normal((3, 5, 2)).astype(dtype)
        path = tmp_path / "t.d2t"
        save_d2t(path, Tensor(arr))
        back = load_d2t(path)
        assert back.data.dtype == np.dtype(dtype)
        assert back.data.tobytes() == arr.tobytes()

    def test_header_layout(self):
        buf = io.BytesIO()
        write_d2t(buf, Tensor(np.zeros((2, 3), dtype=np.float32)))
        raw = buf.getvalue()
        assert raw[:4] == b"D2T\0"
        assert raw[4] == 0  # dtype code f32
        assert raw[5] == 2  # rank
        assert raw[6:10] == (2).to_bytes(4, "little")
        assert raw[10:14] == (3).to_bytes(4, "little")
        assert len(raw) == 14 + 6 * 4

    def test_scalar_roundtrip(self, tmp_path):
        save_d2t(tmp_path / "s.d2t", Tensor(np.float64(3.5)))
        assert load_d2t(tmp_path / "s.d2t").item() == 3.5

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError):
            read_d2t(io.BytesIO(b"XXXX" + b"\0" * 16))
