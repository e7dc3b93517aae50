import json

import numpy as np
import pytest

from diffsplat.fit import FitConfig, StepRecord
from diffsplat.geom import CameraModel, PointCloud, Pose, random_quat
from diffsplat.io import (
    FormatError,
    quantize_unit,
    read_camera,
    read_fit_config,
    read_image,
    read_loss_trace,
    read_pfm,
    read_ply,
    read_volume,
    write_camera,
    write_fit_config,
    write_image,
    write_loss_trace,
    write_ply,
    write_volume,
)


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def test_ply_round_trip_isotropic(tmp_path, rng):
    cloud = PointCloud(rng.uniform(-0.5, 0.5, (7, 3)), rng.uniform(0, 1, 7),
                       sigmas=rng.uniform(0.01, 0.05, 7), colors=rng.uniform(0, 1, (7, 3)))
    write_ply(tmp_path / "a.ply", cloud)
    back = read_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(back.positions, f32(cloud.positions))
    np.testing.assert_array_equal(back.sigmas, f32(cloud.sigmas))
    np.testing.assert_array_equal(back.scales, f32(cloud.scales))
    np.testing.assert_array_equal(back.colors, quantize_unit(cloud.colors) / 255.0)
    # a second pass is a fixed point
    write_ply(tmp_path / "b.ply", back)
    assert (tmp_path / "a.ply").read_text() == (tmp_path / "b.ply").read_text()


def test_ply_round_trip_full_covariance(tmp_path, rng):
    cloud = PointCloud(rng.uniform(-0.5, 0.5, (4, 3)), 0.5, cov_diag=rng.uniform(0.01, 0.05, (4, 3)),
                       cov_rotation=random_quat(rng, 4))
    write_ply(tmp_path / "c.ply", cloud)
    back = read_ply(tmp_path / "c.ply")
    assert back.full_covariance
    np.testing.assert_array_equal(back.cov_diag, f32(cloud.cov_diag))


def test_ply_defaults_for_missing_properties(tmp_path):
    p = tmp_path / "min.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n0.1 0.2 0.3\n")
    c = read_ply(p, default_sigma=0.03)
    np.testing.assert_array_equal(c.sigmas, [0.03, 0.03])
    np.testing.assert_array_equal(c.scales, [1.0, 1.0])
    np.testing.assert_array_equal(c.colors, np.ones((2, 3)))


def test_quantization_examples():
    np.testing.assert_array_equal(quantize_unit([0.0, 0.5, 1.0, -0.2, 1.3, 0.499 / 255]), [0, 128, 255, 0, 255, 0])


@pytest.mark.parametrize("body, needle", [
    ("plx\n", ":1:"),
    ("ply\nformat binary_little_endian 1.0\nend_header\n", ":2:"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
     "end_header\n0 0\n", ":8: expected 3 values"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
     "end_header\n0 zero 0\n", ":8: bad value"),
    ("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
     "end_header\n0 0 0\n", "expected 3 vertices"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n", "'z' missing"),
])
def test_ply_errors_name_the_line(tmp_path, body, needle):
    p = tmp_path / "bad.ply"
    p.write_text(body)
    with pytest.raises(FormatError, match=needle.replace("(", r"\(")):
        read_ply(p)


def test_png_round_trip_is_quantized(tmp_path, rng):
    img = rng.uniform(0, 1, (5, 6))
    write_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), quantize_unit(img) / 255.0)
    rgb = rng.uniform(0, 1, (5, 6, 3))
    write_image(tmp_path / "b.png", rgb)
    assert read_image(tmp_path / "b.png").shape == (5, 6, 3)


def test_pfm_round_trip_is_float32_exact(tmp_path, rng):
    for shape in [(4, 3), (4, 3, 3)]:
        img = rng.standard_normal(shape)
        write_image(tmp_path / "a.pfm", img)
        back = read_pfm(tmp_path / "a.pfm")
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, img.astype(np.float32))


def test_pfm_stores_rows_bottom_up(tmp_path):
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    write_image(tmp_path / "o.pfm", img)
    raw = (tmp_path / "o.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1")
    np.testing.assert_array_equal(np.frombuffer(raw[-16:], "<f4"), [3, 4, 1, 2])


def test_bad_pfm(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n-1\n")
    with pytest.raises(FormatError, match=":1:"):
        read_image(tmp_path / "x.pfm")


def test_camera_round_trip(tmp_path, rng):
    pose, cam = Pose(random_quat(rng), [0.1, 0.2, 2.0]), CameraModel("persp")
    write_camera(tmp_path / "c.json", pose, cam, {"student_rotation": [1, 0, 0, 0]})
    p2, c2 = read_camera(tmp_path / "c.json")
    np.testing.assert_array_equal(p2.rotation, pose.rotation)
    np.testing.assert_array_equal(p2.translation, pose.translation)
    assert c2 == cam
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["format_version"] == 1 and doc["student_rotation"] == [1, 0, 0, 0]


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d.pop("rotation"), "rotation"),
    (lambda d: d.update(rotation=[1, 0, 0]), "rotation"),
    (lambda d: d["camera"].update(kind="fisheye"), "camera.kind"),
    (lambda d: d.update(format_version=9), "format_version"),
])
def test_camera_errors_name_the_field(tmp_path, mutate, needle):
    write_camera(tmp_path / "c.json", Pose(), CameraModel("ortho"))
    doc = json.loads((tmp_path / "c.json").read_text())
    mutate(doc)
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match=needle):
        read_camera(tmp_path / "c.json")


def test_camera_invalid_json_reports_line(tmp_path):
    (tmp_path / "c.json").write_text('{\n"kind": "ortho",\n}')
    with pytest.raises(FormatError, match=r"c.json:3"):
        read_camera(tmp_path / "c.json")


def test_volume_round_trip_and_layout(tmp_path, rng):
    vol = rng.standard_normal((2, 3, 4))
    side = write_volume(tmp_path / "v.raw", vol)
    back = read_volume(tmp_path / "v.raw")
    np.testing.assert_array_equal(back, vol.astype(np.float32))
    meta = json.loads(side.read_text())
    assert meta["dims"] == [2, 3, 4] and meta["layout"] == "k1-slowest"
    raw = np.fromfile(tmp_path / "v.raw", "<f4")
    assert raw[1] == np.float32(vol[0, 0, 1])


def test_fit_config_validation(tmp_path):
    cfg = FitConfig(steps=10, lr=0.01, schedules={"sigma_end": 0.01})
    write_fit_config(tmp_path / "f.json", cfg)
    assert read_fit_config(tmp_path / "f.json") == cfg
    for doc, needle in [({"steps": "ten"}, "steps"), ({"stepz": 1}, "stepz"), ({"path": "slow"}, "path"),
                        ({"schedules": {"sigma_mid": 1}}, "schedules.sigma_mid"), ({"lr": -1}, "lr")]:
        (tmp_path / "g.json").write_text(json.dumps(doc))
        with pytest.raises(FormatError, match=needle):
            read_fit_config(tmp_path / "g.json")


def test_loss_trace_round_trip(tmp_path):
    recs = [StepRecord(0, 1.25, [0, 2], [3, 1], 0.1, 0.9, 0.05), StepRecord(1, 0.1 + 0.2, [1], [0], 0.0, 0.8, 0.04)]
    write_loss_trace(tmp_path / "l.csv", recs)
    rows = read_loss_trace(tmp_path / "l.csv")
    assert rows[0]["selected_candidate"] == "0:3;2:1"
    assert rows[1]["hindsight_loss"] == 0.1 + 0.2
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == \
        "step,hindsight_loss,selected_candidate,student_loss,dropout,sigma"
