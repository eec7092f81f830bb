import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from visaff import dataset as ds
from visaff.errors import (
    BadMagicError,
    MissingDataError,
    PaddingError,
    TruncatedFileError,
    VersionError,
)


# ---------------------------------------------------------------------------
# scale_rating


def test_scale_rating_midpoint():
    assert ds.scale_rating(4) == 0.0


def test_scale_rating_endpoints():
    assert ds.scale_rating(1) == -0.5
    assert ds.scale_rating(7) == 0.5


def test_scale_rating_interior():
    # (5.5 - 4) / 6
    assert ds.scale_rating(5.5) == pytest.approx(0.25, abs=0)


@pytest.mark.parametrize("bad", [0, 0.99, 7.01, 8, -3])
def test_scale_rating_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        ds.scale_rating(bad)


@given(
    st.floats(min_value=1, max_value=7),
    st.floats(min_value=1, max_value=7),
)
def test_scale_rating_is_affine(a, b):
    lhs = ds.scale_rating(a) + ds.scale_rating(b)
    rhs = 2.0 * ds.scale_rating((a + b) / 2.0)
    assert lhs == pytest.approx(rhs, abs=1e-12)


# ---------------------------------------------------------------------------
# aggregation


def _table(rows):
    return ds.RawAnnotationTable(
        [ds.AnnotationRow(i, a, tuple(r)) for i, a, r in rows]
    )


def test_aggregate_mean_midpoint():
    table = _table([
        ("img", "a", [3] + [4] * 11),
        ("img", "b", [5] + [4] * 11),
    ])
    labels = ds.aggregate_labels(table, mode="mean")
    assert labels.values[0, 0] == 0.0


def test_aggregate_median_by_hand():
    table = _table([
        ("img", "a", [2] * 12),
        ("img", "b", [4] * 12),
        ("img", "c", [7] * 12),
    ])
    labels = ds.aggregate_labels(table, mode="median")
    assert np.all(labels.values[0] == 0.0)


def test_aggregate_single_annotator_endpoint():
    table = _table([("img", "a", [7] * 12)])
    labels = ds.aggregate_labels(table, mode="mean")
    assert np.all(labels.values[0] == 0.5)


def test_aggregate_single_annotator_equals_scaled_row():
    ratings = [1, 2, 3, 4, 5, 6, 7, 1, 3, 5, 7, 2]
    table = _table([("img", "a", ratings)])
    labels = ds.aggregate_labels(table, mode="mean")
    expected = [ds.scale_rating(r) for r in ratings]
    np.testing.assert_array_equal(labels.values[0], expected)


def test_aggregate_rows_sorted_by_image_id():
    table = _table([("z", "a", [4] * 12), ("a", "a", [4] * 12), ("m", "a", [4] * 12)])
    labels = ds.aggregate_labels(table)
    assert labels.image_ids == ["a", "m", "z"]


def test_aggregate_missing_image_error_names_id():
    table = _table([("img1", "a", [4] * 12)])
    with pytest.raises(MissingDataError, match="img2"):
        ds.aggregate_labels(table, expected_ids=["img1", "img2"])


def test_duplicate_annotator_rejected():
    table = _table([("img", "a", [4] * 12), ("img", "a", [5] * 12)])
    with pytest.raises(ValueError, match="duplicate"):
        ds.aggregate_labels(table)


def test_annotation_csv_round_trip(tmp_path):
    path = tmp_path / "ann.csv"
    header = "image_id,annotator_id," + ",".join(f"d{i+1}" for i in range(12))
    path.write_text(header + "\nimgA,u1,1,2,3,4,5,6,7,1,2,3,4,5\n")
    table = ds.read_annotations(path)
    assert table.rows[0].ratings == (1, 2, 3, 4, 5, 6, 7, 1, 2, 3, 4, 5)


def test_annotation_csv_bad_rating_cites_line(tmp_path):
    path = tmp_path / "ann.csv"
    header = "image_id,annotator_id," + ",".join(f"d{i+1}" for i in range(12))
    path.write_text(header + "\nimgA,u1," + ",".join(["4"] * 12)
                    + "\nimgB,u1,8" + ",4" * 11 + "\n")
    with pytest.raises(ValueError, match="line 3"):
        ds.read_annotations(path)


def test_label_matrix_rejects_out_of_range():
    with pytest.raises(ValueError):
        ds.LabelMatrix(["a"], np.full((1, 12), 0.6))


def test_label_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    labels = ds.LabelMatrix(
        ["a", "b"], rng.uniform(-0.5, 0.5, (2, 12)), aggregation="median"
    )
    path = tmp_path / "labels.csv"
    labels.to_csv(path)
    back = ds.LabelMatrix.from_csv(path, aggregation="median")
    assert back.image_ids == labels.image_ids
    np.testing.assert_array_equal(back.values, labels.values)


# ---------------------------------------------------------------------------
# feature files


def _tiled_record(image_id, seed=None, fill=0.0):
    if seed is None:
        values = np.full((4, 16, 2048), fill, dtype=np.float32)
    else:
        rng = np.random.default_rng(seed)
        values = rng.normal(size=(4, 16, 2048)).astype(np.float32)
    values[3, :, 1920:] = 0.0
    return ds.FeatureTensor(image_id, "tiled", values)


def test_feature_file_empty_round_trip(tmp_path):
    path = tmp_path / "f.amtf"
    ds.write_features(path, [], layout="tiled")
    assert ds.read_features(path) == []


def test_feature_file_zero_record_round_trip(tmp_path):
    path = tmp_path / "f.amtf"
    rec = _tiled_record("img0")
    ds.write_features(path, [rec])
    back = ds.read_features(path)
    assert len(back) == 1
    assert back[0].image_id == "img0"
    np.testing.assert_array_equal(back[0].values, rec.values)


def test_feature_file_random_round_trip_bit_exact(tmp_path):
    path = tmp_path / "f.amtf"
    recs = [_tiled_record(f"img{i}", seed=i) for i in range(3)]
    ds.write_features(path, recs)
    back = ds.read_features(path)
    assert [r.image_id for r in back] == [r.image_id for r in recs]
    for a, b in zip(recs, back):
        assert a.values.tobytes() == b.values.tobytes()


def test_whole_file_round_trip(tmp_path):
    path = tmp_path / "w.amtf"
    rng = np.random.default_rng(9)
    recs = [
        ds.FeatureTensor(f"img{i}", "whole",
                         rng.normal(size=8064).astype(np.float32))
        for i in range(2)
    ]
    ds.write_features(path, recs)
    back = ds.read_features(path)
    for a, b in zip(recs, back):
        assert a.values.tobytes() == b.values.tobytes()


def test_feature_file_bad_magic(tmp_path):
    path = tmp_path / "f.amtf"
    ds.write_features(path, [_tiled_record("x", seed=0)])
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError):
        ds.read_features(path)


def test_feature_file_bad_version(tmp_path):
    path = tmp_path / "f.amtf"
    ds.write_features(path, [_tiled_record("x", seed=0)])
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionError):
        ds.read_features(path)


def test_feature_file_truncated(tmp_path):
    path = tmp_path / "f.amtf"
    ds.write_features(path, [_tiled_record("x", seed=0)])
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 100])
    with pytest.raises(TruncatedFileError):
        ds.read_features(path)


def test_feature_file_nonzero_pad_rejected_on_read(tmp_path):
    path = tmp_path / "f.amtf"
    rec = _tiled_record("x", seed=0)
    ds.write_features(path, [rec])
    blob = bytearray(path.read_bytes())
    # flip the very last float (densenet pad region) to a non-zero value
    blob[-4:] = np.float32(1.0).tobytes()
    path.write_bytes(bytes(blob))
    with pytest.raises(PaddingError):
        ds.read_features(path)


def test_nonzero_pad_rejected_on_validate():
    rec = _tiled_record("x", seed=0)
    rec.values[3, 7, 2000] = 0.5
    with pytest.raises(PaddingError):
        rec.validate()


def test_mixed_layouts_rejected(tmp_path):
    whole = ds.FeatureTensor("w", "whole", np.zeros(8064, dtype=np.float32))
    with pytest.raises(ValueError, match="mixed"):
        ds.write_features(tmp_path / "f.amtf", [_tiled_record("t"), whole])


# ---------------------------------------------------------------------------
# fold plans


def test_kfold_even_split():
    ids = [f"i{k}" for k in range(10)]
    plan = ds.kfold_split(ids, 5, seed=1)
    folds = [plan.fold_members(f) for f in range(5)]
    assert all(len(f) == 2 for f in folds)
    assert sorted(sum(folds, [])) == sorted(ids)


def test_kfold_uneven_sizes():
    ids = [f"i{k}" for k in range(11)]
    plan = ds.kfold_split(ids, 5, seed=1)
    sizes = sorted(len(plan.fold_members(f)) for f in range(5))
    assert sizes == [2, 2, 2, 2, 3]


def test_kfold_deterministic():
    ids = [f"i{k}" for k in range(23)]
    a = ds.kfold_split(ids, 5, seed=42)
    b = ds.kfold_split(ids, 5, seed=42)
    assert a.assignments == b.assignments


def test_kfold_partition_exhaustive():
    ids = [f"i{k}" for k in range(17)]
    plan = ds.kfold_split(ids, 4, seed=3)
    seen = set()
    for f in range(4):
        members = set(plan.fold_members(f))
        assert not members & seen
        seen |= members
    assert seen == set(ids)


def test_kfold_rejects_k_above_n():
    with pytest.raises(ValueError):
        ds.kfold_split(["a", "b"], 3, seed=0)


def test_kfold_rejects_k_below_2():
    with pytest.raises(ValueError):
        ds.kfold_split(["a", "b"], 1, seed=0)


# ---------------------------------------------------------------------------
# synthetic planted dataset


def test_synth_deterministic():
    a_feats, a_labels = ds.synth_planted_dataset(4, 5, seed=11)
    b_feats, b_labels = ds.synth_planted_dataset(4, 5, seed=11)
    np.testing.assert_array_equal(a_labels.values, b_labels.values)
    for x, y in zip(a_feats, b_feats):
        assert x.values.tobytes() == y.values.tobytes()


def test_synth_labels_affine_in_t():
    feats, labels = ds.synth_planted_dataset(6, 5, seed=2)
    for rec, row in zip(feats, labels.values):
        t = (float(rec.values[0, 5, 0]) - ds.PLANTED_OFFSET) / ds.PLANTED_GAIN
        expected = np.array(ds.PLANTED_SLOPES) * t + np.array(ds.PLANTED_INTERCEPTS)
        np.testing.assert_allclose(row, expected, atol=1e-6)


def test_synth_records_pass_validation():
    feats, labels = ds.synth_planted_dataset(3, 0, seed=7)
    for rec in feats:
        rec.validate()
    assert np.all(np.abs(labels.values) <= 0.5)


def test_synth_planted_coordinate_oracle_r2():
    # least squares on the planted coordinate alone recovers every
    # dimension exactly (the labels are noiseless affine images of t)
    feats, labels = ds.synth_planted_dataset(500, 5, seed=3)
    x = np.array([rec.values[0, 5, 0] for rec in feats], dtype=np.float64)
    design = np.stack([x, np.ones_like(x)], axis=1)
    for d in range(12):
        coef, *_ = np.linalg.lstsq(design, labels.values[:, d], rcond=None)
        pred = design @ coef
        ss_res = np.sum((labels.values[:, d] - pred) ** 2)
        ss_tot = np.sum((labels.values[:, d] - labels.values[:, d].mean()) ** 2)
        assert 1.0 - ss_res / ss_tot > 1.0 - 1e-9


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError):
        ds.synth_planted_dataset(0, 5, seed=1)
    with pytest.raises(ValueError):
        ds.synth_planted_dataset(3, 16, seed=1)


def test_whole_from_tiled_shape_and_pooling():
    feats, _ = ds.synth_planted_dataset(2, 5, seed=4)
    whole = ds.whole_from_tiled(feats)
    assert all(w.values.shape == (8064,) for w in whole)
    v = feats[0].values.astype(np.float64)
    np.testing.assert_allclose(
        whole[0].values[:2048], v[0].mean(axis=0).astype(np.float32), rtol=1e-6
    )
    np.testing.assert_allclose(
        whole[0].values[3 * 2048:], v[3, :, :1920].mean(axis=0).astype(np.float32),
        rtol=1e-6,
    )
