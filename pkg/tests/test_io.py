import json

import numpy as np
import pytest

from imlearn.environment import ChainSpec, build_im_mps
from imlearn.errors import FormatError
from imlearn.io import (
    FORMAT_VERSION,
    config_hash,
    dumps_json,
    file_hash,
    load_checkpoint,
    load_dataset,
    load_im,
    save_checkpoint,
    save_dataset,
    save_im,
)
from imlearn.learn import TrainConfig, train
from imlearn.measurement import mixed_grain_dataset, sample_dataset


@pytest.fixture(scope="module")
def im():
    return build_im_mps(ChainSpec(model="XXZ", j=0.3, j_prime=0.1, length=6, steps=4), chi_max=8)


def _header(path):
    with open(path, "rb") as fh:
        return json.loads(fh.readline())


def test_im_roundtrip(tmp_path, im):
    p = tmp_path / "im.bin"
    save_im(p, im, {"config_hash": "abc"})
    back = load_im(p)
    assert back.bond_dims == im.bond_dims
    for a, b in zip(back.cores, im.cores):
        assert a.tobytes() == np.asarray(b, dtype=complex).tobytes()
    np.testing.assert_array_equal(back.left, im.left)
    np.testing.assert_array_equal(back.right, im.right)
    assert back.chain_spec == im.chain_spec
    assert back.discarded_weight == im.discarded_weight
    h = _header(p)
    assert h["format_version"] == FORMAT_VERSION and h["config_hash"] == "abc"
    assert h["t"] == 4 and h["provenance"] == "first_principles"


def test_im_byte_identical(tmp_path, im):
    save_im(tmp_path / "a.bin", im)
    save_im(tmp_path / "b.bin", load_im(tmp_path / "a.bin"))
    assert file_hash(tmp_path / "a.bin") == file_hash(tmp_path / "b.bin")


def test_im_payload_little_endian(tmp_path, im):
    p = tmp_path / "im.bin"
    save_im(p, im)
    raw = p.read_bytes()
    payload = raw[raw.index(b"\n") + 1 :]
    first = np.frombuffer(payload[:16], dtype="<f8")
    assert first[0] == im.cores[0].reshape(-1)[0].real
    assert first[1] == im.cores[0].reshape(-1)[0].imag


@pytest.mark.parametrize(
    "mutate",
    [
        lambda raw: raw[:-8],
        lambda raw: raw + b"\0" * 16,
        lambda raw: b"not json\n" + raw[raw.index(b"\n") + 1 :],
        lambda raw: raw.replace(b'"format_version":1', b'"format_version":9', 1),
        lambda raw: raw.replace(b'"t":4', b'"t":5', 1),
        lambda raw: raw.replace(b"\n", b" ", 1)[:20],
    ],
)
def test_im_corrupt(tmp_path, im, mutate):
    p = tmp_path / "im.bin"
    save_im(p, im)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(FormatError):
        load_im(p)


def test_im_nonfinite_rejected(tmp_path, im):
    p = tmp_path / "im.bin"
    save_im(p, im)
    raw = bytearray(p.read_bytes())
    off = raw.index(b"\n") + 1
    raw[off : off + 8] = np.array([np.nan]).astype("<f8").tobytes()
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_im(p)


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_im(tmp_path / "nope.bin")


def test_dataset_roundtrip(tmp_path, im):
    ds = mixed_grain_dataset(im, 31, 2, seed=4)
    p = tmp_path / "ds.bin"
    save_dataset(p, ds, {"config_hash": "x"})
    back = load_dataset(p)
    assert back.grain_schema == ds.grain_schema
    assert back.t == ds.t and back.seed == ds.seed
    for (g1, x1), (g2, x2) in zip(back.segments, ds.segments):
        assert g1 == g2
        np.testing.assert_array_equal(x1, x2)
    h = _header(p)
    assert h["N"] == 31 and h["grain_schema"] == [[1, 15], [2, 16]]
    # rerunning yields the same bytes
    save_dataset(tmp_path / "ds2.bin", mixed_grain_dataset(im, 31, 2, seed=4), {"config_hash": "x"})
    assert file_hash(p) == file_hash(tmp_path / "ds2.bin")


def test_dataset_corrupt(tmp_path, im):
    p = tmp_path / "ds.bin"
    save_dataset(p, sample_dataset(im, 10, seed=1))
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_dataset(p)
    p.write_bytes(raw.replace(b'"N":10', b'"N":11', 1))
    with pytest.raises(FormatError):
        load_dataset(p)
    p.write_bytes(raw[:-1] + b"\x07")
    with pytest.raises(FormatError):
        load_dataset(p)


def test_checkpoint_roundtrip_and_resume(tmp_path, im):
    ds = sample_dataset(im, 400, seed=2)
    cfg = TrainConfig(batch_size=100, epochs=4, m=2, r=2, lr_initial=0.1, lr_final=0.01)
    full = train(ds, cfg)
    half = train(ds, cfg, stop_after=2)
    p = tmp_path / "ck.bin"
    save_checkpoint(p, half, cfg, ds.t)
    res, cfg2, header = load_checkpoint(p)
    assert cfg2 == cfg
    assert header["t_trained_on"] == 4 and header["epoch"] == 2
    assert res.ansatz.V.tobytes() == half.ansatz.V.tobytes()
    assert res.adam.s_V.tobytes() == half.adam.s_V.tobytes()
    resumed = train(ds, cfg2, resume=res)
    assert resumed.ansatz.V.tobytes() == full.ansatz.V.tobytes()
    assert resumed.history.mean_nll == full.history.mean_nll
    # checkpoints do not depend on wall time
    save_checkpoint(tmp_path / "ck2.bin", train(ds, cfg, stop_after=2), cfg, ds.t)
    assert file_hash(p) == file_hash(tmp_path / "ck2.bin")


def test_json_helpers():
    assert dumps_json({"b": 1, "a": [1.5]}) == '{"b":1,"a":[1.5]}'
    with pytest.raises(ValueError):
        dumps_json({"x": float("nan")})
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
