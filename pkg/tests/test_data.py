
import numpy as np
import pytest

from conftest import png_bytes, write_ppm
from tsrbnn.data import (
    DatasetError,
    LabeledDataset,
    RelabelMap,
    Source,
    crop_roi,
    decode_image,
    decode_png,
    decode_ppm,
    load_chinese,
    load_class_folders,
    load_dataset,
    load_gtsrb,
    load_manifest,
    preprocess,
    remap_labels,
    resize_bilinear,
    synthetic_dataset,
)

HEADER = "Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId\n"


# ---- PPM ----

def test_ppm_smallest():
    img = decode_ppm(b"P6 2 1 255\n" + bytes([1, 2, 3, 4, 5, 6]))
    assert img.shape == (1, 2, 3)
    assert img.tolist() == [[[1, 2, 3], [4, 5, 6]]]


def test_ppm_comment_line_same_decode():
    payload = bytes(range(12))
    plain = decode_ppm(b"P6\n2 2\n255\n" + payload)
    commented = decode_ppm(b"P6\n# a comment\n2 2\n# another\n255\n" + payload)
    np.testing.assert_array_equal(plain, commented)


def test_ppm_row_major():
    payload = bytes(range(18))
    img = decode_ppm(b"P6 3 2 255 " + payload)
    assert img[1, 0].tolist() == [9, 10, 11]


def test_ppm_ascii_rejected():
    with pytest.raises(DatasetError, match="P3"):
        decode_ppm(b"P3 1 1 255\n0 0 0\n")


def test_ppm_maxval_rejected():
    with pytest.raises(DatasetError, match="maxval"):
        decode_ppm(b"P6 1 1 65535\n" + bytes(6))


def test_ppm_truncated_payload():
    with pytest.raises(DatasetError, match="truncated"):
        decode_ppm(b"P6 2 2 255\n" + bytes(5))


def test_ppm_truncated_header():
    with pytest.raises(DatasetError):
        decode_ppm(b"P6 2 ")


def test_ppm_malformed_header():
    with pytest.raises(DatasetError, match="malformed"):
        decode_ppm(b"P6 two 1 255\n" + bytes(6))


# ---- PNG ----

def test_png_red_pixel():
    img = decode_png(png_bytes(np.array([[[255, 0, 0]]], np.uint8)))
    assert img.tolist() == [[[255, 0, 0]]]


def test_png_rgba_alpha_stripped(rng):
    rgba = rng.integers(0, 256, (3, 4, 4)).astype(np.uint8)
    img = decode_png(png_bytes(rgba))
    np.testing.assert_array_equal(img, rgba[..., :3])


def test_png_16_bit_rejected():
    with pytest.raises(DatasetError, match="bit depth 16"):
        decode_png(png_bytes(np.zeros((1, 1, 3), np.uint16), bit_depth=16))


def test_png_crc_failure():
    data = bytearray(png_bytes(np.array([[[255, 0, 0]]], np.uint8)))
    data[20] ^= 0xFF  # inside IHDR body
    with pytest.raises(DatasetError, match="CRC"):
        decode_png(bytes(data))


def test_png_bad_signature():
    with pytest.raises(DatasetError):
        decode_png(b"not a png at all")


def test_decode_image_dispatch(rng):
    img = rng.integers(0, 256, (2, 3, 3)).astype(np.uint8)
    ppm = b"P6 3 2 255\n" + img.tobytes()
    np.testing.assert_array_equal(decode_image(ppm), img)
    np.testing.assert_array_equal(decode_image(png_bytes(img)), img)


# ---- resize / crop ----

def test_resize_identity(rng):
    img = rng.integers(0, 256, (7, 7, 3)).astype(np.uint8)
    np.testing.assert_array_equal(resize_bilinear(img, 7), img.astype(np.float64))


def test_resize_checkerboard_closed_form():
    a, b, c, d = 0.0, 255.0, 255.0, 0.0
    img = np.array([[[a] * 3, [b] * 3], [[c] * 3, [d] * 3]])
    out = resize_bilinear(img, 4)
    expected = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            u, v = i / 3, j / 3
            expected[i, j] = (a * (1 - u) * (1 - v) + b * (1 - u) * v
                              + c * u * (1 - v) + d * u * v)
    for ch in range(3):
        np.testing.assert_allclose(out[..., ch], expected, rtol=0, atol=1e-9)
    # hand-checked midpoints: (1/3, 1/3) gives 255 * 4/9
    assert out[1, 1, 0] == pytest.approx(255 * 4 / 9)


def test_resize_constant():
    img = np.full((5, 9, 3), 77, np.uint8)
    out = resize_bilinear(img, 30)
    assert out.shape == (30, 30, 3)
    np.testing.assert_allclose(out, 77.0, atol=1e-9)


def test_resize_from_single_pixel():
    out = resize_bilinear(np.array([[[1, 2, 3]]], np.uint8), 4)
    assert out.shape == (4, 4, 3)
    np.testing.assert_array_equal(out[2, 3], [1, 2, 3])


def test_crop_inclusive():
    img = np.arange(5 * 6 * 3).reshape(5, 6, 3)
    out = crop_roi(img, 1, 2, 3, 4)
    assert out.shape == (3, 3, 3)
    np.testing.assert_array_equal(out, img[2:5, 1:4])


def test_crop_out_of_bounds():
    with pytest.raises(DatasetError, match="outside"):
        crop_roi(np.zeros((4, 4, 3)), 0, 0, 9, 3)


def test_preprocess_range_and_dtype(rng):
    img = rng.integers(0, 256, (20, 17, 3)).astype(np.uint8)
    x = preprocess(img, 30)
    assert x.dtype == np.float32 and x.shape == (30, 30, 3)
    assert x.min() >= 0 and x.max() <= 1
    full = preprocess(np.full((4, 4, 3), 255, np.uint8), 8)
    assert np.all(full == 1.0)


# ---- directory trees ----

def _gtsrb_train(tmp_path, rng, per_class=3, classes=(0, 1, 2)):
    root = tmp_path / "Final_Training" / "Images"
    for c in classes:
        folder = root / f"{c:05d}"
        folder.mkdir(parents=True)
        rows = []
        for k in range(per_class):
            name = f"{c:05d}_{k:05d}.ppm"
            img = rng.integers(0, 256, (12, 14, 3)).astype(np.uint8)
            write_ppm(folder / name, img, comment=(k == 0))
            rows.append(f"{name};14;12;1;1;12;10;{c}\n")
        (folder / f"GT-{c:05d}.csv").write_text(HEADER + "".join(rows))
    return tmp_path


def _gtsrb_test(tmp_path, rng, n=5):
    folder = tmp_path / "test"
    folder.mkdir()
    rows = []
    for k in range(n):
        name = f"{k:05d}.ppm"
        write_ppm(folder / name, rng.integers(0, 256, (10, 11, 3)).astype(np.uint8))
        rows.append(f"{name};11;10;0;0;10;9;{k % 3}\n")
    (folder / "GT-final_test.csv").write_text(HEADER + "".join(rows))
    return folder


def test_gtsrb_train_tree(tmp_path, rng):
    ds = load_gtsrb(_gtsrb_train(tmp_path, rng), "train", size=30)
    assert len(ds) == 9 and ds.images.shape == (9, 30, 30, 3)
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert ds.paths == sorted(ds.paths)
    assert ds.roi_applied.all() and ds.source is Source.GTSRB
    assert ds.histogram().sum() == len(ds)


def test_gtsrb_train_roi_matches_manual(tmp_path, rng):
    root = _gtsrb_train(tmp_path, rng, per_class=1, classes=(4,))
    ds = load_gtsrb(root, "train", size=16)
    raw = decode_ppm((root / "Final_Training" / "Images" / "00004" / "00004_00000.ppm").read_bytes())
    manual = (resize_bilinear(raw[1:11, 1:13], 16) / 255.0).astype(np.float32)
    np.testing.assert_array_equal(ds.images[0], manual)


def test_gtsrb_test_folder(tmp_path, rng):
    folder = _gtsrb_test(tmp_path, rng)
    ds = load_gtsrb(folder, "test", size=30)
    assert len(ds) == 5 and ds.labels.tolist() == [0, 1, 2, 0, 1]
    assert load_dataset(folder, 30).labels.tolist() == ds.labels.tolist()


def test_gtsrb_roi_out_of_bounds_names_row(tmp_path, rng):
    folder = _gtsrb_test(tmp_path, rng, n=3)
    csv = folder / "GT-final_test.csv"
    lines = csv.read_text().splitlines(keepends=True)
    lines[2] = "00001.ppm;11;10;0;0;12;9;1\n"  # Roi.X2 > Width
    csv.write_text("".join(lines))
    with pytest.raises(DatasetError, match=r":3: ROI .* 00001\.ppm"):
        load_gtsrb(folder, "test")


def test_gtsrb_missing_file(tmp_path, rng):
    folder = _gtsrb_test(tmp_path, rng, n=3)
    (folder / "00002.ppm").unlink()
    with pytest.raises(DatasetError, match="missing file 00002.ppm"):
        load_gtsrb(folder, "test")


def test_gtsrb_missing_csv(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="missing annotation CSV"):
        load_gtsrb(tmp_path / "empty", "test")


def test_gtsrb_size_mismatch(tmp_path, rng):
    folder = _gtsrb_test(tmp_path, rng, n=2)
    csv = folder / "GT-final_test.csv"
    csv.write_text(csv.read_text().replace("00000.ppm;11;10", "00000.ppm;13;10"))
    with pytest.raises(DatasetError, match="annotation says 13x10"):
        load_gtsrb(folder, "test")


def test_split_name_checked(tmp_path):
    with pytest.raises(ValueError):
        load_gtsrb(tmp_path, "validation")


def test_load_deterministic_and_parallel(tmp_path, rng):
    root = _gtsrb_train(tmp_path, rng, per_class=4)
    a = load_gtsrb(root, size=30)
    b = load_gtsrb(root, size=30)
    c = load_gtsrb(root, size=30, workers=4)
    for other in (b, c):
        assert a.paths == other.paths
        np.testing.assert_array_equal(a.images, other.images)
        np.testing.assert_array_equal(a.labels, other.labels)


def test_folders_without_csv(tmp_path, rng):
    for c in (3, 1):
        d = tmp_path / f"{c:05d}"
        d.mkdir()
        for k in range(2):
            (d / f"img{k}.png").write_bytes(png_bytes(rng.integers(0, 256, (5, 6, 3)).astype(np.uint8)))
        (d / "readme.txt").write_text("ignored")
    ds = load_class_folders(tmp_path, 8)
    assert ds.labels.tolist() == [1, 1, 3, 3]
    assert not ds.roi_applied.any()


def test_chinese_by_filename(tmp_path, rng):
    for name in ("005_0001.png", "000_0003.png", "012_0002_j.png"):
        (tmp_path / name).write_bytes(png_bytes(rng.integers(0, 256, (6, 6, 3)).astype(np.uint8)))
    ds = load_chinese(tmp_path, 48)
    assert ds.labels.tolist() == [0, 5, 12]
    assert ds.source is Source.CHINESE


def test_chinese_annotation(tmp_path, rng):
    (tmp_path / "001_0000.png").write_bytes(png_bytes(rng.integers(0, 256, (8, 9, 3)).astype(np.uint8)))
    (tmp_path / "TsignRecgTest_Annotation.txt").write_text("001_0000.png;9;8;1;1;7;6;44;\n")
    ds = load_chinese(tmp_path, 48)
    assert ds.labels.tolist() == [44] and ds.roi_applied.all()


def test_manifest(tmp_path, rng):
    for name in ("b.ppm", "a.ppm"):
        write_ppm(tmp_path / name, rng.integers(0, 256, (4, 4, 3)).astype(np.uint8))
    (tmp_path / "list.txt").write_text("# test set\nb.ppm,7\n\na.ppm, 2\n")
    ds = load_manifest(tmp_path / "list.txt", 30)
    assert ds.paths == ["a.ppm", "b.ppm"] and ds.labels.tolist() == [2, 7]
    assert load_dataset(tmp_path / "list.txt", 30).labels.tolist() == [2, 7]


def test_manifest_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("no_label_here\n")
    with pytest.raises(DatasetError, match="bad.txt:1"):
        load_manifest(bad, 30)
    bad.write_text("ghost.ppm,1\n")
    with pytest.raises(DatasetError, match="missing file ghost.ppm"):
        load_manifest(bad, 30)


def test_load_dataset_missing_path(tmp_path):
    with pytest.raises(DatasetError, match="no such file"):
        load_dataset(tmp_path / "nope", 30)


# ---- relabeling ----

def _labeled(labels):
    n = len(labels)
    return LabeledDataset(np.zeros((n, 2, 2, 3)), np.array(labels), source=Source.BELGIAN,
                          class_count=62)


def test_remap_identity():
    ds = _labeled(list(range(43)) * 2)
    out = remap_labels(ds, RelabelMap.identity())
    np.testing.assert_array_equal(out.labels, ds.labels)
    assert out.paths == ds.paths


def test_remap_empty_map():
    out = remap_labels(_labeled([0, 1, 2]), RelabelMap({}))
    assert len(out) == 0


def test_remap_example_map_counting(rng):
    labels = rng.integers(0, 62, 500)
    mapping = RelabelMap.example("belgian")
    out = remap_labels(_labeled(labels), mapping)
    kept = sum(int(l) in mapping.pairs for l in labels)
    assert len(out) == kept
    assert len(labels) - len(out) == sum(int(l) not in mapping.pairs for l in labels)
    assert out.labels.min() >= 0 and out.labels.max() < 43
    expected = [mapping.pairs[int(l)] for l in labels if int(l) in mapping.pairs]
    assert out.labels.tolist() == expected


def test_example_maps_valid():
    for name in ("belgian", "chinese"):
        m = RelabelMap.example(name)
        assert m.pairs and all(0 <= t < 43 for t in m.pairs.values())


def test_remap_target_out_of_range():
    with pytest.raises(DatasetError, match="targets"):
        RelabelMap({0: 43})


def test_remap_not_injective():
    with pytest.raises(DatasetError, match="injective"):
        RelabelMap.parse("1,5\n2,5\n")


def test_remap_parse_errors(tmp_path):
    with pytest.raises(DatasetError, match=":2:"):
        RelabelMap.parse("1,2\nbanana\n")
    with pytest.raises(DatasetError, match="twice"):
        RelabelMap.parse("1,2\n1,3\n")
    p = tmp_path / "m.map"
    p.write_text("# comment\n4,0  # trailing\n")
    assert RelabelMap.load(p).pairs == {4: 0}


# ---- synthetic ----

def test_synthetic_deterministic():
    a = synthetic_dataset(40, 30, 4, seed=3)
    b = synthetic_dataset(40, 30, 4, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [10, 10, 10, 10]
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_sample_view():
    ds = synthetic_dataset(8, 12, 2, seed=0)
    s = ds[3]
    assert s.image.shape == (1, 12, 12, 3) and s.label == 1
    assert s.source_dataset is Source.SYNTHETIC and not s.roi_applied


def test_dataset_shape_check():
    with pytest.raises(DatasetError):
        LabeledDataset(np.zeros((3, 2, 2, 3)), np.zeros(2))
