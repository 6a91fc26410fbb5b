"""Network shapes/norms, checkpoint container integrity, descriptor export."""
import json

import numpy as np
import pytest

from voxdesc import autodiff as ad
from voxdesc import descriptor as dsc
from voxdesc.lrf import LrfFrame
from voxdesc.voxelizer import VoxelGrid, VoxelGridSpec


def _grids(rng, n, h):
    frame = LrfFrame(np.eye(3), np.zeros(3), 0.3)
    spec = VoxelGridSpec(np.zeros(3), frame, 0.35, h, 1e-3)
    return [VoxelGrid(values=rng.uniform(0, 1, size=(h, h, h)), spec=spec)
            for _ in range(n)]


def test_init_network_shapes_and_support():
    p = dsc.init_network(0, descriptor_dim=8, resolution=8)
    chain = [1] + list(dsc.CONV_CHANNELS)
    for i, k in enumerate(p.conv_kernels):
        assert k.shape == (chain[i + 1], chain[i], 3, 3, 3)
        assert k.dtype == np.float32
    assert p.linear_weight.shape == (8, dsc.flat_features(8))
    np.testing.assert_array_equal(p.linear_bias, 0.0)
    np.testing.assert_allclose(p.support, 2.0 * 0.3 / np.sqrt(3.0), rtol=1e-12)

    q = dsc.init_network(0, descriptor_dim=8, resolution=8)
    for a, b in zip(p.conv_kernels, q.conv_kernels):
        np.testing.assert_array_equal(a, b)
    r = dsc.init_network(1, descriptor_dim=8, resolution=8)
    assert not np.array_equal(p.conv_kernels[0], r.conv_kernels[0])


def test_init_network_validation():
    with pytest.raises(ValueError, match="descriptor_dim"):
        dsc.init_network(0, descriptor_dim=1)
    with pytest.raises(ValueError, match="r_lrf"):
        dsc.init_network(0, r_lrf=0.0)


def test_flat_features_follows_stride_schedule():
    # resolution 16: strides (1,1,2,1,2,1) give 16,16,8,8,4,4 -> 4^3 * 128
    assert dsc.flat_features(16) == 8192
    assert dsc.flat_features(8) == 1024


def test_forward_shapes_and_unit_norms():
    rng = np.random.default_rng(0)
    params = dsc.init_network(0, descriptor_dim=8, resolution=8)
    desc = dsc.forward(_grids(rng, 3, 8), params)
    assert desc.shape == (3, 8)
    assert desc.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(desc.astype(np.float64), axis=1),
                               1.0, atol=1e-5)


def test_forward_tape_matches_inference_path():
    rng = np.random.default_rng(1)
    params = dsc.init_network(0, descriptor_dim=8, resolution=8)
    grids = _grids(rng, 2, 8)
    plain = dsc.forward(grids, params)
    taped = dsc.forward(grids, params, tape=ad.Tape(np.float32))
    np.testing.assert_allclose(taped.values, plain, atol=2e-6)


def test_forward_ops_gradients_reach_all_parameters():
    rng = np.random.default_rng(2)
    params = dsc.init_network(0, descriptor_dim=8, resolution=8)
    tape = ad.Tape(np.float32)
    leaves = dsc.materialize(params, tape)
    assert sorted(leaves) == sorted(dsc.param_names())
    x = tape.leaf(np.stack([g.values for g in _grids(rng, 2, 8)])[..., None])
    out = dsc.forward_ops(x, leaves)
    tape.backward(ad.abs_sum(out))
    for name in dsc.param_names():
        g = leaves[name].grad
        assert g is not None and np.any(g != 0), name


def test_forward_rejects_mismatched_grids():
    rng = np.random.default_rng(3)
    params = dsc.init_network(0, descriptor_dim=8, resolution=8)
    with pytest.raises(ValueError, match="resolution"):
        dsc.forward(_grids(rng, 1, 4), params)
    with pytest.raises(ValueError, match="empty"):
        dsc.forward([], params)
    with pytest.raises(TypeError, match="VoxelGrid"):
        dsc.forward([np.zeros((8, 8, 8)), "nope"], params)
    with pytest.raises(ValueError, match="does not match"):
        dsc.forward(np.zeros((2, 4, 4, 4)), params)


def test_forward_accepts_raw_arrays():
    rng = np.random.default_rng(4)
    params = dsc.init_network(0, descriptor_dim=8, resolution=8)
    x = rng.uniform(0, 1, size=(2, 8, 8, 8))
    a = dsc.forward(x, params)
    b = dsc.forward(x[..., None], params)
    np.testing.assert_array_equal(a, b)


def test_descriptor_container_validates_norm():
    v = np.zeros(8, dtype=np.float32)
    v[0] = 1.0
    assert dsc.Descriptor(v).values.shape == (8,)
    with pytest.raises(ValueError, match="norm"):
        dsc.Descriptor(v * 2)
    with pytest.raises(ValueError, match="vector"):
        dsc.Descriptor(np.eye(2))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = dsc.init_network(5, descriptor_dim=8, resolution=8)
    params.log_support = -1.2345678901234567  # exercise float64 scalar path
    path = tmp_path / "net.bin"
    dsc.save_checkpoint(params, path)
    assert [p.name for p in tmp_path.iterdir()] == ["net.bin"]  # no temp litter
    back = dsc.load_checkpoint(path)
    for a, b in zip(params.conv_kernels, back.conv_kernels):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(params.linear_weight, back.linear_weight)
    np.testing.assert_array_equal(params.linear_bias, back.linear_bias)
    assert back.log_support == params.log_support
    assert (back.resolution, back.descriptor_dim) == (8, 8)


def _patched(raw: bytes, mutate) -> bytes:
    hlen = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    header = json.loads(raw[12:12 + hlen].decode())
    mutate(header)
    h2 = json.dumps(header, sort_keys=True).encode()
    return raw[:8] + np.uint32(len(h2)).tobytes() + h2 + raw[12 + hlen:]


def test_checkpoint_corruption_is_reported(tmp_path):
    params = dsc.init_network(0, descriptor_dim=8, resolution=8)
    path = tmp_path / "net.bin"
    dsc.save_checkpoint(params, path)
    raw = path.read_bytes()

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(dsc.CheckpointError, match="magic"):
        dsc.load_checkpoint(bad)

    bad.write_bytes(raw[:40])
    with pytest.raises(dsc.CheckpointError, match="truncated"):
        dsc.load_checkpoint(bad)

    bad.write_bytes(_patched(raw, lambda h: h.update(version="99")))
    with pytest.raises(dsc.CheckpointError, match="version"):
        dsc.load_checkpoint(bad)

    bad.write_bytes(_patched(raw, lambda h: h["tensors"].pop("conv2.kernel")))
    with pytest.raises(dsc.CheckpointError, match="conv2.kernel"):
        dsc.load_checkpoint(bad)

    bad.write_bytes(_patched(
        raw, lambda h: h["tensors"]["conv0.kernel"].update(shape=[1, 1, 3, 3, 3])))
    with pytest.raises(dsc.CheckpointError, match="conv0.kernel"):
        dsc.load_checkpoint(bad)

    bad.write_bytes(_patched(
        raw, lambda h: h["tensors"]["linear.bias"].update(offset=10 ** 9)))
    with pytest.raises(dsc.CheckpointError, match="linear.bias"):
        dsc.load_checkpoint(bad)


def test_checkpoint_rejects_nonfinite_blob(tmp_path):
    params = dsc.init_network(0, descriptor_dim=8, resolution=8)
    path = tmp_path / "net.bin"
    dsc.save_checkpoint(params, path)
    raw = bytearray(path.read_bytes())
    hlen = int(np.frombuffer(bytes(raw[8:12]), dtype="<u4")[0])
    header = json.loads(bytes(raw[12:12 + hlen]).decode())
    off = 12 + hlen + header["tensors"]["log_support"]["offset"]
    raw[off:off + 8] = np.float64(np.nan).tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(dsc.CheckpointError, match="log_support.*non-finite"):
        dsc.load_checkpoint(path)


# ---------------------------------------------------------------------------
# descriptor export


def test_descriptor_export_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    desc = rng.normal(size=(5, 8)).astype(np.float32)
    idx = np.array([3, 1, 4, 1, 5])
    path = tmp_path / "d.bin"
    dsc.write_descriptors(path, desc, idx)
    back, bidx = dsc.read_descriptors(path)
    np.testing.assert_array_equal(back, desc)
    np.testing.assert_array_equal(bidx, idx)


def test_descriptor_export_validation(tmp_path):
    path = tmp_path / "d.bin"
    with pytest.raises(ValueError, match=r"\(count, dim\)"):
        dsc.write_descriptors(path, np.zeros(4, dtype=np.float32), [0])
    with pytest.raises(ValueError, match="indices"):
        dsc.write_descriptors(path, np.zeros((2, 4), dtype=np.float32), [0])

    dsc.write_descriptors(path, np.zeros((2, 4), dtype=np.float32), [0, 1])
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="expected"):
        dsc.read_descriptors(path)
    path.write_bytes(raw[:4])
    with pytest.raises(ValueError, match="truncated"):
        dsc.read_descriptors(path)

    path.write_bytes(raw)
    (tmp_path / "d.bin.indices.txt").write_text("0\n")
    with pytest.raises(ValueError, match="sidecar"):
        dsc.read_descriptors(path)
