import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointjem.dataio import (
    DEFAULT_MESH_POINTS,
    CloudNormalizer,
    LabeledCloudDataset,
    ParseError,
    ShapeSpec,
    TriangleMesh,
    load_off,
    make_splits,
    make_synthetic_dataset,
    normalize_cloud,
    read_manifest,
    read_xyz,
    sample_mesh_surface,
    synth_shape,
    write_manifest,
    write_xyz,
)
from pointjem.netcore import ContractViolation


def barycentric(p, a, b, c):
    v0, v1, v2 = b - a, c - a, p - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return 1 - v - w, v, w


# mesh sampling

def test_single_triangle_containment(rng):
    V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    pts = sample_mesh_surface(TriangleMesh(V, np.array([[0, 1, 2]])), 2000, rng)
    assert pts.shape == (2000, 3)
    assert np.all(pts[:, 2] == 0)
    assert np.all(pts[:, 0] >= -1e-12) and np.all(pts[:, 1] >= -1e-12)
    assert np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)


def test_area_weighted_face_choice():
    # face 0 area 1, face 1 area 3, disjoint in z
    V = np.array([[0.0, 0, 0], [2, 0, 0], [0, 1, 0], [0, 0, 5], [6, 0, 5], [0, 1, 5]])
    mesh = TriangleMesh(V, np.array([[0, 1, 2], [3, 4, 5]]))
    np.testing.assert_allclose(mesh.face_areas(), [1.0, 3.0])
    pts = sample_mesh_surface(mesh, 40_000, np.random.default_rng(0))
    assert abs(np.mean(pts[:, 2] == 5.0) - 0.75) < 0.01


def test_zero_area_face_never_selected(rng):
    V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 6, 6], [7, 7, 7]])
    mesh = TriangleMesh(V, np.array([[3, 4, 5], [0, 1, 2]]))
    pts = sample_mesh_surface(mesh, 5000, rng)
    assert np.all(pts[:, 2] == 0)


def test_zero_total_area_rejected(rng):
    V = np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2]])
    with pytest.raises(ContractViolation):
        sample_mesh_surface(TriangleMesh(V, np.array([[0, 1, 2]])), 10, rng)


def test_samples_lie_on_triangles(rng):
    V = rng.normal(size=(6, 3))
    F = np.array([[0, 1, 2], [3, 4, 5], [0, 2, 4]])
    pts = sample_mesh_surface(TriangleMesh(V, F), 500, rng)
    for p in pts:
        ok = False
        for f in F:
            a, b, c = V[f]
            n = np.cross(b - a, c - a)
            plane = abs((p - a) @ n) / np.linalg.norm(n)
            bary = barycentric(p, a, b, c)
            if plane < 1e-9 and min(bary) > -1e-9:
                ok = True
                break
        assert ok


def test_default_mesh_points():
    assert DEFAULT_MESH_POINTS == 2048


# OFF

def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_off_minimal(tmp_path):
    m = load_off(write(tmp_path, "a.off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"))
    assert m.faces.shape == (1, 3)


def test_off_quad_fans_to_two_triangles(tmp_path):
    m = load_off(write(tmp_path, "q.off", "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"))
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])


def test_off_counts_on_header_line(tmp_path):
    m = load_off(write(tmp_path, "h.off", "OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"))
    assert len(m.vertices) == 3


def test_off_comments_and_blank_lines(tmp_path):
    m = load_off(write(tmp_path, "c.off", "OFF\n# comment\n\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"))
    assert len(m.faces) == 1


@pytest.mark.parametrize("text,line", [
    ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", 6),
    ("PLY\n3 1 0\n", 1),
    ("OFF\n3 x 0\n", 2),
    ("OFF\n3 1 0\n0 0 0\n1 0\n0 1 0\n3 0 1 2\n", 4),
    ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n", 5),
])
def test_off_errors_name_line(tmp_path, text, line):
    with pytest.raises(ParseError) as info:
        load_off(write(tmp_path, "bad.off", text))
    assert info.value.line == line
    assert f":{line}:" in str(info.value)


# normalization

def test_normalize_cube_span(rng):
    X = rng.uniform(0, 2, (500, 3))
    X[0], X[1] = 0.0, 2.0
    Y = normalize_cloud(X)
    np.testing.assert_allclose(Y.min(0), -1.0, atol=1e-12)
    np.testing.assert_allclose(Y.max(0), 1.0, atol=1e-12)


def test_normalize_preserves_aspect():
    X = np.array([[0.0, 0, 0], [4, 2, 0]])
    Y = normalize_cloud(X)
    np.testing.assert_allclose(Y[:, 0], [-1, 1])
    np.testing.assert_allclose(Y[:, 1], [-0.5, 0.5])


def test_normalize_degenerate():
    assert np.all(normalize_cloud(np.ones((5, 3)) * 3.0) == 0)
    assert np.all(normalize_cloud(np.array([[1.0, 2.0, 3.0]])) == 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3), n=st.integers(2, 50))
def test_normalize_idempotent_and_bounded(seed, scale, n):
    X = np.random.default_rng(seed).normal(size=(n, 3)) * scale + 7.0
    Y = normalize_cloud(X)
    assert np.all(np.abs(Y) <= 1.0)
    np.testing.assert_allclose(normalize_cloud(Y), Y, atol=1e-12)


def test_cloud_normalizer_transformer(rng):
    X = rng.uniform(3, 5, (4, 10, 3))
    out = CloudNormalizer().fit_transform(X)
    for a, b in zip(out, X):
        np.testing.assert_array_equal(a, normalize_cloud(b))
    assert CloudNormalizer().get_params() == {}


# synthetic shapes

def test_sphere_unit_distance():
    p = synth_shape(ShapeSpec("sphere", jitter=0.0), 500, 0, normalize=False)
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-12)


def test_cube_surface_max_coordinate():
    p = synth_shape(ShapeSpec("cube", jitter=0.0), 500, 0)
    np.testing.assert_allclose(np.abs(p).max(axis=1), 1.0, atol=1e-12)


def test_torus_membership():
    R, r = 1.0, 0.25
    p = synth_shape(ShapeSpec("torus", jitter=0.0, major_radius=R, minor_radius=r), 1000, 0, normalize=False)
    resid = np.linalg.norm(p[:, :2], axis=1) - R
    assert np.all(np.abs(resid) <= r + 1e-9)
    np.testing.assert_allclose(np.hypot(resid, p[:, 2]), r, atol=1e-9)


@pytest.mark.parametrize("kind", ["sphere", "cube", "cylinder", "torus", "cone", "plane"])
def test_shapes_deterministic_and_normalized(kind):
    spec = ShapeSpec(kind, jitter=0.01, stretch=(0.8, 1.2), rotate=True)
    a, b = synth_shape(spec, 256, 11), synth_shape(spec, 256, 11)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (256, 3)
    assert np.all(np.abs(a) <= 1.0)


def test_rotation_is_about_vertical_axis():
    flat = synth_shape(ShapeSpec("plane", jitter=0.0, rotate=True), 200, 3, normalize=False)
    np.testing.assert_allclose(flat[:, 2], 0, atol=1e-12)


@pytest.mark.parametrize("kw", [{"kind": "blob"}, {"kind": "cube", "jitter": -1.0},
                                {"kind": "cube", "stretch": (0.0, 1.0)}, {"kind": "cube", "stretch": (2.0, 1.0)}])
def test_shape_spec_validation(kw):
    with pytest.raises(ContractViolation):
        ShapeSpec(**kw)


def test_synthetic_dataset_shape():
    ds = make_synthetic_dataset(per_class=5, n_points=32, seed=1)
    assert ds.clouds.shape == (20, 32, 3)
    assert ds.class_names == ["sphere", "cube", "cylinder", "torus"]
    np.testing.assert_array_equal(np.bincount(ds.labels), [5, 5, 5, 5])


# splits

def tiny_dataset(per_class, classes=3):
    labels = np.repeat(np.arange(classes), per_class)
    return LabeledCloudDataset(np.zeros((len(labels), 2, 3)), labels, [str(c) for c in range(classes)], "all")


def test_split_80_20():
    tr, te = make_splits(tiny_dataset(100), 0.8, rng=0)
    np.testing.assert_array_equal(np.bincount(tr.labels), [80] * 3)
    np.testing.assert_array_equal(np.bincount(te.labels), [20] * 3)


def test_split_ceiling_rule():
    tr, te = make_splits(tiny_dataset(3), 0.5, rng=0)
    np.testing.assert_array_equal(np.bincount(tr.labels), [2] * 3)
    np.testing.assert_array_equal(np.bincount(te.labels), [1] * 3)


def test_split_deterministic_partition():
    ds = make_synthetic_dataset(per_class=6, n_points=8, seed=2)
    a = make_splits(ds, 0.7, rng=5)
    b = make_splits(ds, 0.7, rng=5)
    np.testing.assert_array_equal(a[0].clouds, b[0].clouds)
    all_rows = np.concatenate([a[0].clouds, a[1].clouds]).reshape(len(ds), -1)
    assert len({r.tobytes() for r in all_rows}) == len(ds)


def test_split_errors():
    with pytest.raises(ContractViolation):
        make_splits(tiny_dataset(1), 0.5)
    with pytest.raises(ContractViolation):
        make_splits(tiny_dataset(5), 1.0)


# XYZ

def test_xyz_round_trip(tmp_path, rng):
    X = rng.normal(size=(100, 3)) * 10
    write_xyz(X, tmp_path / "c.xyz")
    text = (tmp_path / "c.xyz").read_bytes()
    assert b"\r" not in text and text.endswith(b"\n")
    assert all(len(line.split(b" ")) == 3 for line in text.splitlines())
    assert np.abs(read_xyz(tmp_path / "c.xyz") - X).max() < 1e-8 * np.abs(X).max()


def test_xyz_errors(tmp_path):
    (tmp_path / "e.xyz").write_text("")
    with pytest.raises(ParseError):
        read_xyz(tmp_path / "e.xyz")
    (tmp_path / "t.xyz").write_text("0 0 0\n1 2\n")
    with pytest.raises(ParseError) as info:
        read_xyz(tmp_path / "t.xyz")
    assert info.value.line == 2
    (tmp_path / "f.xyz").write_text("0 0 0\n1 2 abc\n")
    with pytest.raises(ParseError) as info:
        read_xyz(tmp_path / "f.xyz")
    assert info.value.line == 2


# manifest

def test_manifest_round_trip(tmp_path, rng):
    for i in range(4):
        write_xyz(rng.uniform(-1, 1, (5, 3)), tmp_path / f"{i}.xyz")
    doc = write_manifest(tmp_path / "manifest.json", ["a", "b"],
                         {"train": [("0.xyz", 0), ("1.xyz", 1)], "test": [("2.xyz", 0), ("3.xyz", 1)]},
                         5, seed=3)
    assert read_manifest(tmp_path / "manifest.json") == doc
    assert doc["normalized"] is True and doc["seed"] == 3
    _, ds = read_manifest(tmp_path / "manifest.json", "test")
    assert ds.clouds.shape == (2, 5, 3)
    np.testing.assert_array_equal(ds.labels, [0, 1])
    with pytest.raises(ContractViolation):
        read_manifest(tmp_path / "manifest.json", "val")


def test_manifest_bad_tag(tmp_path):
    (tmp_path / "m.json").write_text('{"format": "other", "version": 1}')
    with pytest.raises(ContractViolation, match="expected"):
        read_manifest(tmp_path / "m.json")
