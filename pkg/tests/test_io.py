import numpy as np
import pytest

from tpsmotion import io
from tpsmotion.errors import ContractError, FlowFormatError
from tpsmotion.geometry import AffineTransform
from tpsmotion.motion import DenseFlow


def test_flo_bytes_round_trip(tmp_path, rng):
    disp = rng.normal(scale=20, size=(5, 7, 2)).astype(np.float32)
    io.write_flo(disp, tmp_path / "a.flo")
    raw = (tmp_path / "a.flo").read_bytes()
    assert raw[:4] == b"PIEH" and len(raw) == 12 + 5 * 7 * 8
    back = io.read_flo(tmp_path / "a.flo")
    np.testing.assert_array_equal(back, disp)
    io.write_flo(back, tmp_path / "b.flo")
    assert (tmp_path / "b.flo").read_bytes() == raw


def test_flow_round_trip_is_float32_exact(tmp_path, rng):
    flow = DenseFlow(rng.uniform(-1.1, 1.1, size=(9, 6, 2)))
    io.write_flow(flow, tmp_path / "f.flo")
    back = io.read_flow(tmp_path / "f.flo")
    np.testing.assert_allclose(back.coords, flow.coords, atol=1e-6)
    # re-writing what was read reproduces the file bit for bit
    io.write_flow(back, tmp_path / "g.flo")
    assert (tmp_path / "g.flo").read_bytes() == (tmp_path / "f.flo").read_bytes()


def test_flo_bad_magic(tmp_path):
    (tmp_path / "bad.flo").write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(FlowFormatError, match="XXXX"):
        io.read_flo(tmp_path / "bad.flo")


def test_flo_truncated_payload(tmp_path):
    io.write_flo(np.zeros((3, 3, 2), np.float32), tmp_path / "t.flo")
    raw = (tmp_path / "t.flo").read_bytes()
    (tmp_path / "t.flo").write_bytes(raw[:-4])
    with pytest.raises(FlowFormatError, match="declares 3x3"):
        io.read_flo(tmp_path / "t.flo")


def _doc(rng, frames=2, bg=True):
    return io.KeypointDocument(
        3,
        4,
        [
            io.KeypointFrame(
                rng.uniform(-1, 1, (3, 4, 2)),
                rng.uniform(-1, 1, (3, 4, 2)),
                AffineTransform(rng.normal(size=(2, 3))) if bg else None,
            )
            for _ in range(frames)
        ],
    )


def test_keypoint_document_round_trip(tmp_path, rng):
    doc = _doc(rng)
    doc.frames[1].bg = None
    io.write_keypoints(doc, tmp_path / "k.json")
    back = io.read_keypoints(tmp_path / "k.json")
    assert (back.k, back.n, back.version) == (3, 4, 1)
    for a, b in zip(doc.frames, back.frames):
        np.testing.assert_array_equal(a.source, b.source)
        np.testing.assert_array_equal(a.driving, b.driving)
    np.testing.assert_array_equal(back.frames[0].bg.matrix, doc.frames[0].bg.matrix)
    assert back.frames[1].bg is None
    np.testing.assert_array_equal(back.frames[1].background.matrix, AffineTransform.identity().matrix)


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda d: d.update(version=2), "version"),
        (lambda d: d["frames"][0]["source"].pop(), "shape"),
        (lambda d: d.pop("K"), "malformed"),
    ],
)
def test_keypoint_document_validation(rng, mutate, match):
    d = _doc(rng, frames=1).to_dict()
    mutate(d)
    with pytest.raises(ContractError, match=match):
        io.KeypointDocument.from_dict(d)


def test_frame_index_checked(rng):
    with pytest.raises(ContractError):
        _doc(rng, frames=1).frame(3)


@pytest.mark.parametrize("suffix, channels", [(".png", 3), (".png", 1), (".pgm", 1)])
def test_image_round_trip(tmp_path, rng, suffix, channels):
    img = rng.integers(0, 256, size=(channels, 6, 5)).astype(float)
    io.write_image(img, tmp_path / f"i{suffix}")
    np.testing.assert_array_equal(io.read_image(tmp_path / f"i{suffix}"), img)


def test_uint8_rounding_half_to_even():
    np.testing.assert_array_equal(io.to_uint8(np.array([0.5, 1.5, 2.5, -3.0, 300.0])), [0, 2, 2, 0, 255])
