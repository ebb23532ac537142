import numpy as np
import pytest

from breplat import synthgen
from breplat.brep import validate_topology
from breplat.synthgen import DatasetError, DatasetRecord


def _chi(model):
    rep = validate_topology(model)
    assert rep.ok, rep.__dict__
    assert len(rep.shell_euler) == 1
    return rep.shell_euler[0]


def test_box_combinatorics():
    m = synthgen.make_box(2, 2, 2)
    assert m.num_surfaces == 6
    assert m.num_half_curves == 24
    assert len(m.vertices) == 8
    assert _chi(m) == 2


def test_box_rejects_nonpositive_extent():
    with pytest.raises(ValueError):
        synthgen.make_box(1, -1, 1)


def test_hexagonal_prism_combinatorics():
    poly = np.array([[np.cos(a), np.sin(a)] for a in np.linspace(0, 2 * np.pi, 6, endpoint=False)])
    m = synthgen.make_prism(poly, 1.0)
    assert m.num_surfaces == 8
    assert m.num_half_curves == 2 * 18
    assert len(m.vertices) == 12
    assert _chi(m) == 2


def test_l_shaped_prism():
    poly = np.array([[0, 0], [1, 0], [1, 0.5], [0.5, 0.5], [0.5, 1], [0, 1]])
    m = synthgen.make_prism(poly, 2.0)
    assert m.num_surfaces == 8
    assert _chi(m) == 2


def test_16gon_prism_is_cylinder_like():
    poly = np.array([[np.cos(a), np.sin(a)] for a in np.linspace(0, 2 * np.pi, 16, endpoint=False)])
    m = synthgen.make_prism(poly, 1.0)
    assert m.num_surfaces == 18


def test_prism_rejects_bad_polygons():
    with pytest.raises(ValueError):
        synthgen.make_prism(np.array([[0, 0], [1, 0], [1, 1]])[::-1], 1.0)  # clockwise
    bowtie = np.array([[0, 0], [1, 1], [1, 0], [0, 1]])
    with pytest.raises(ValueError):
        synthgen.make_prism(bowtie, 1.0)


def test_box_hole_genus_one():
    m = synthgen.make_box_with_hole((2, 2, 1), (0.9, 1.1), (0.4, 0.3))
    assert _chi(m) == 0


def test_box_union_genus_zero():
    m = synthgen.make_box_union((2, 2, 1), (1, 0.8, 0.6), (0.4, 0.5))
    assert m.num_surfaces == 14
    assert _chi(m) == 2


def test_grid_points_on_face_plane():
    for m in (
        synthgen.make_box_with_hole((2, 2, 1), (0.9, 1.1), (0.4, 0.3)),
        synthgen.make_prism(
            np.array([[np.cos(a), np.sin(a)] for a in np.linspace(0, 2 * np.pi, 7, endpoint=False)]),
            1.3,
        ),
    ):
        for s in m.surfaces:
            g = s.points
            o = g[0, 0]
            n = np.cross(g[-1, 0] - o, g[0, -1] - o)
            n /= np.linalg.norm(n)
            assert np.abs((g.reshape(-1, 3) - o) @ n).max() <= 1e-12


def test_make_family_deterministic():
    a = synthgen.make_family(7, 3, "box")
    b = synthgen.make_family(7, 3, "box")
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.surfaces, rb.surfaces)
        assert np.array_equal(ra.half_curves, rb.half_curves)


def test_make_family_box_hole_all_chi_zero():
    for r in synthgen.make_family(3, 6, "box_hole"):
        rep = validate_topology(r.to_model())
        assert rep.ok
        assert rep.shell_euler == [0]


def test_make_family_validates_inputs():
    with pytest.raises(ValueError):
        synthgen.make_family(0, 0, "box")
    with pytest.raises(ValueError):
        synthgen.make_family(0, 1, "pyramid")


def test_family_records_pass_topology():
    for r in synthgen.make_family(11, 16, "mixed"):
        model = r.to_model()
        rep = validate_topology(model)
        assert rep.ok
        assert rep.shell_euler[0] in (0, 2)
        # twin reversal exact on the float32 record arrays
        tw = r.twin
        for j in range(r.half_curves.shape[0]):
            assert np.array_equal(r.half_curves[int(tw[j])], r.half_curves[j][::-1])


def test_dataset_round_trip(tmp_path):
    records = synthgen.make_family(5, 10, "mixed")
    path = tmp_path / "ds.zip"
    synthgen.write_dataset(records, path)
    back = synthgen.read_dataset(path)
    assert len(back) == 10
    for ra, rb in zip(records, back):
        assert np.array_equal(ra.surfaces, rb.surfaces)
        assert np.array_equal(ra.half_curves, rb.half_curves)
        assert np.array_equal(ra.surf_curve_adj, rb.surf_curve_adj)
        assert np.array_equal(ra.twin, rb.twin)
        assert ra.label == rb.label


def test_dataset_rerun_byte_identical(tmp_path):
    records = synthgen.make_family(9, 4, "mixed")
    p1, p2 = tmp_path / "a.zip", tmp_path / "b.zip"
    synthgen.write_dataset(records, p1)
    synthgen.write_dataset(synthgen.make_family(9, 4, "mixed"), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_dataset_round_trip(tmp_path):
    path = tmp_path / "empty.zip"
    synthgen.write_dataset([], path)
    assert synthgen.read_dataset(path) == []


def test_truncated_dataset_names_record(tmp_path):
    records = synthgen.make_family(2, 6, "box")
    path = tmp_path / "ds.zip"
    synthgen.write_dataset(records, path)
    data = path.read_bytes()
    path.write_bytes(data[: int(len(data) * 0.55)])
    with pytest.raises(DatasetError) as err:
        synthgen.read_dataset(path)
    assert "record" in str(err.value)


def test_split_indices_ratios():
    tr, va, te = synthgen.split_indices(1000, seed=1)
    assert len(tr) == 900 and len(va) == 50 and len(te) == 50
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(1000))
    tr2, _, _ = synthgen.split_indices(1000, seed=1)
    assert np.array_equal(tr, tr2)


def test_record_model_round_trip_vertices_merged():
    m = synthgen.make_box(1, 2, 3)
    rec = DatasetRecord.from_model(m)
    back = rec.to_model()
    assert len(back.vertices) == 8
    assert back.curve_vert_adj.shape == (24, 8)
