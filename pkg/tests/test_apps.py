import csv
import struct

import numpy as np
import pytest

from permconv.apps import cli
from permconv.apps.images import (
    bicubic_resize,
    box_downsample,
    center_crop,
    load_corpus,
    luma,
    pixel_features,
)
from permconv.apps.io import (
    FormatError,
    KernelCheckpoint,
    decode_image,
    decode_tensor,
    encode_image,
    encode_tensor,
    read_checkpoint,
    read_image,
    read_tensor,
    write_checkpoint,
    write_image,
    write_tensor,
)
from permconv.apps.learned import (
    apply_filter,
    filter_problem,
    fit_least_squares,
    fit_mean_psnr,
    fit_sgd,
    gaussian_weights,
)
from permconv.apps.metrics import PSNR_IDENTICAL, iou, psnr
from permconv.apps.upsample import joint_upsample, upsample_problem
from permconv.apps.viz import lattice_viz, simplex_ids, image_features
from permconv.filterops import PermutohedralKernel, gaussian_kernel, identity_kernel
from permconv.lattice import FeatureSet, elevate, find_simplex


class TestMetrics:
    def test_psnr_identical(self, rng):
        x = rng.uniform(size=(5, 5))
        assert psnr(x, x) == PSNR_IDENTICAL == float("inf")

    def test_psnr_value(self):
        a = np.zeros(100)
        b = np.full(100, 0.1)
        assert abs(psnr(a, b) - 20.0) < 1e-12
        assert abs(psnr(a * 255, b * 255, max_val=255) - 20.0) < 1e-12

    def test_psnr_noise_level(self, rng):
        clean = rng.uniform(size=(512, 512))
        noisy = clean + rng.normal(0, 25 / 255, size=clean.shape)
        assert abs(psnr(clean, noisy) - 20 * np.log10(255 / 25)) < 0.1
        assert abs(20 * np.log10(255 / 25) - 20.17) < 0.005

    def test_iou(self):
        gt = np.array([[0, 1], [1, 1]])
        assert iou(gt, gt) == 1.0
        assert iou(np.array([[0, 1], [0, 0]]), gt) == 1 / 3
        assert iou(np.zeros(4), np.zeros(4)) == 1.0
        with pytest.raises(ValueError):
            iou(np.zeros(3), np.zeros(4))
        with pytest.raises(ValueError):
            psnr(np.zeros(3), np.zeros(4))


class TestTensorFiles:
    @pytest.mark.parametrize("shape", [(), (0,), (7,), (3, 4), (2, 3, 5)])
    def test_roundtrip_byte_exact(self, shape, rng, tmp_path):
        a = rng.normal(size=shape)
        buf = encode_tensor(a)
        assert buf[:4] == b"PHLT"
        assert len(buf) == 8 + 8 * len(shape) + 8 * a.size
        b, end = decode_tensor(buf)
        assert end == len(buf) and b.shape == a.shape and np.array_equal(a, b)
        assert encode_tensor(b) == buf
        write_tensor(tmp_path / "t.bin", a)
        assert (tmp_path / "t.bin").read_bytes() == buf
        assert np.array_equal(read_tensor(tmp_path / "t.bin"), a)

    def test_layout(self):
        buf = encode_tensor(np.array([[1.0, 2.0]]))
        assert struct.unpack("<HH", buf[4:8]) == (1, 2)
        assert struct.unpack("<QQ", buf[8:24]) == (1, 2)
        assert struct.unpack("<dd", buf[24:]) == (1.0, 2.0)

    def test_errors_report_offsets(self, tmp_path):
        good = encode_tensor(np.arange(6.0).reshape(2, 3))
        with pytest.raises(FormatError) as e:
            decode_tensor(b"XXXX" + good[4:])
        assert e.value.offset == 0
        with pytest.raises(FormatError) as e:
            decode_tensor(good[:-3])
        assert e.value.offset == 24
        bad_version = good[:4] + struct.pack("<H", 9) + good[6:]
        with pytest.raises(FormatError) as e:
            decode_tensor(bad_version)
        assert e.value.offset == 4
        (tmp_path / "x").write_bytes(good + b"\0")
        with pytest.raises(FormatError) as e:
            read_tensor(tmp_path / "x")
        assert e.value.offset == len(good)
        with pytest.raises(FormatError):
            decode_tensor(b"PH")


class TestCheckpoints:
    def test_roundtrip(self, rng, tmp_path):
        k = PermutohedralKernel(3, 2, rng.normal(size=(2, 3, 65)))
        write_checkpoint(tmp_path / "k.bin", k, [0.5, 0.5, 4.0])
        ck = read_checkpoint(tmp_path / "k.bin")
        assert (ck.kernel.d, ck.kernel.s) == (3, 2)
        assert np.array_equal(ck.kernel.weights, k.weights)
        assert ck.scales.tolist() == [0.5, 0.5, 4.0]
        assert ck.encode() == (tmp_path / "k.bin").read_bytes()

    def test_rejects_mismatch(self, rng):
        k = PermutohedralKernel(2, 1, rng.normal(size=7))
        buf = KernelCheckpoint(k, [1.0, 1.0]).encode()
        # claim s = 2 in the header: 19 weights expected, 7 stored
        bad = buf[:8] + struct.pack("<H", 2) + buf[10:]
        with pytest.raises(FormatError):
            KernelCheckpoint.decode(bad)
        with pytest.raises(FormatError):
            KernelCheckpoint.decode(buf + b"\0")
        with pytest.raises(FormatError):
            KernelCheckpoint.decode(b"PHLT" + buf[4:])
        with pytest.raises(ValueError):
            KernelCheckpoint(k, [1.0])


class TestImages:
    def test_pgm_ppm_roundtrip(self, rng, tmp_path):
        gray = rng.integers(0, 256, size=(7, 9)) / 255.0
        color = rng.integers(0, 256, size=(5, 4, 3)) / 255.0
        for name, img in (("g.pgm", gray), ("c.ppm", color)):
            write_image(tmp_path / name, img)
            back = read_image(tmp_path / name)
            assert back.shape == img.shape and np.array_equal(back, img)
            assert encode_image(back) == (tmp_path / name).read_bytes()

    def test_header_comments(self):
        buf = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
        assert decode_image(buf).tolist() == [[0.0, 1.0]]

    @pytest.mark.parametrize("buf", [b"P3\n1 1\n255\n0", b"P5\n2 2\n255\n\x00",
                                     b"P5\n1 1\n65535\n\x00\x00", b"P5\n1 x\n255\n\x00"])
    def test_bad_images(self, buf):
        with pytest.raises(FormatError):
            decode_image(buf)

    def test_luma_and_crop(self, rng):
        img = rng.uniform(size=(10, 12, 3))
        np.testing.assert_allclose(luma(img), img @ [0.299, 0.587, 0.114])
        assert center_crop(img, 6).shape == (6, 6, 3)
        with pytest.raises(ValueError):
            center_crop(img, 11)

    def test_box_downsample(self):
        img = np.arange(16.0).reshape(4, 4)
        assert box_downsample(img, 2).tolist() == [[2.5, 4.5], [10.5, 12.5]]
        with pytest.raises(ValueError):
            box_downsample(img, 3)

    def test_bicubic(self, rng):
        img = rng.uniform(size=(6, 5, 3))
        np.testing.assert_allclose(bicubic_resize(img, (6, 5)), img, atol=1e-15)
        np.testing.assert_allclose(bicubic_resize(np.full((4, 4), 0.3), (16, 16)), 0.3, atol=1e-15)
        ramp = np.tile(np.arange(8.0), (8, 1))
        up = bicubic_resize(ramp, (8, 16))
        # linear ramps are reproduced away from the clamped borders
        np.testing.assert_allclose(np.diff(up[:, 4:-4], axis=1), 0.5, atol=1e-12)

    def test_pixel_features(self):
        fs = pixel_features(np.array([[0.5, 1.0]]), 0.1, 2.0, value_range=255, stride=4, offset=1.5)
        assert fs.points.tolist() == [[1.5, 1.5, 127.5], [5.5, 1.5, 255.0]]
        assert fs.scales.tolist() == [0.1, 0.1, 2.0]

    def test_corpus_from_directory(self, rng, tmp_path):
        write_image(tmp_path / "a.pgm", rng.uniform(size=(20, 20)))
        write_image(tmp_path / "b.ppm", rng.uniform(size=(30, 30, 3)))
        (tmp_path / "notes.txt").write_text("ignored")
        corpus = load_corpus(tmp_path, size=16, gray=True)
        assert [n for n, _ in corpus] == ["a", "b"]
        assert all(img.shape == (16, 16) for _, img in corpus)


class TestLearnedFilters:
    def _problems(self, rng, k=3):
        out = []
        for _ in range(k):
            fs = FeatureSet(rng.uniform(0, 4, size=(60, 2)), [1.0, 1.0])
            out.append(filter_problem(fs, None, rng.normal(size=60), 1))
        return out

    def test_gaussian_weights_reproduce_filter(self, rng):
        (p,) = self._problems(rng, 1)
        from permconv.filterops import bilateral_filter

        fs = FeatureSet(np.zeros((1, 2)), [1.0, 1.0])
        assert fs.d == p.d
        ref = apply_filter(p, gaussian_weights(2, 1))
        own = apply_filter(p, gaussian_weights(2, 1), self_normalize=True)
        np.testing.assert_allclose(ref, own, rtol=1e-13)
        assert bilateral_filter is not None

    def test_least_squares_recovers_weights(self, rng):
        probs = self._problems(rng)
        w_true = rng.normal(size=7)
        targets = [apply_filter(p, w_true) for p in probs]
        w = fit_least_squares(probs, targets)
        np.testing.assert_allclose(w, w_true, rtol=1e-8, atol=1e-8)
        w2 = fit_mean_psnr(probs, targets, gaussian_weights(2, 1), iters=2)
        np.testing.assert_allclose(w2, w_true, rtol=1e-6, atol=1e-6)

    def test_sgd_reduces_loss(self, rng):
        probs = self._problems(rng)
        w_true = gaussian_weights(2, 1) * 1.5
        targets = [apply_filter(p, w_true) for p in probs]
        w, curve = fit_sgd(probs, targets, gaussian_weights(2, 1), lr=0.5, epochs=20)
        assert curve[-1] < 0.1 * curve[0]


class TestUpsampling:
    def test_identity_at_factor_one(self, rng):
        img = rng.uniform(size=(10, 10, 3))
        w = identity_kernel(3, 2).weights[0, 0]
        out = joint_upsample(img, img, 1, w, self_normalize=True, position_scale=5.0)
        np.testing.assert_allclose(out, img, rtol=0, atol=1e-14)

    def test_constant_image_preserved(self, rng):
        guide = rng.uniform(size=(16, 16, 3))
        low = np.full((4, 4, 3), 0.4)
        out = joint_upsample(guide, low, 4)
        assert out.shape == guide.shape
        np.testing.assert_allclose(out, 0.4, rtol=0, atol=1e-13)

    def test_shape_check(self, rng):
        with pytest.raises(ValueError):
            upsample_problem(rng.uniform(size=(10, 10, 3)), rng.uniform(size=(3, 3, 3)), 4)


class TestViz:
    def test_tiny_scale_cells_touch_origin(self, rng):
        fs = image_features(rng.uniform(size=(12, 12, 3)), "xyrgb", 1e-9)
        keys, _ = find_simplex(elevate(fs.points, fs.scales))
        assert np.all(np.any(np.all(keys == 0, axis=2), axis=1))

    def test_constant_image_single_color(self):
        out = lattice_viz(np.full((6, 7, 3), 0.3), "rgb", 2.0)
        assert len(np.unique(out.reshape(-1, 3), axis=0)) == 1

    def test_position_only_ignores_content(self, rng):
        a = lattice_viz(rng.uniform(size=(16, 16, 3)), "xy", 0.2)
        b = lattice_viz(rng.uniform(size=(16, 16, 3)), "xy", 0.2)
        assert np.array_equal(a, b)
        assert len(np.unique(a.reshape(-1, 3), axis=0)) > 1

    def test_color_edge_splits_cells(self):
        img = np.full((8, 8, 3), 0.2)
        img[:, 4:] = 0.8
        ids = simplex_ids(image_features(img, "rgb", 5.0)).reshape(8, 8)
        assert len(set(ids[:, :4].ravel())) == 1 and len(set(ids[:, 4:].ravel())) == 1
        assert ids[0, 0] != ids[0, 7]

    def test_bad_feature_name(self, rng):
        with pytest.raises(ValueError):
            image_features(rng.uniform(size=(2, 2, 3)), "xyz", 1.0)


# command line

def _write_pair(tmp_path, rng, F=2, size=16):
    yy, xx = np.mgrid[:size, :size] / size
    img = np.stack([xx, yy, 0.5 * (xx + yy)], axis=2)
    img = np.round(img * 255) / 255
    write_image(tmp_path / "guide.ppm", img)
    write_image(tmp_path / "low.ppm", box_downsample(img, F))
    return img


class TestCli:
    def test_gradcheck_seed7(self, capsys):
        assert cli.main(["gradcheck", "--seed", "7"]) == 0
        line = capsys.readouterr().out.strip()
        err = float(line.split()[3])
        assert err < 1e-5 and "PASS" in line

    def test_gradcheck_impossible_tolerance(self, capsys):
        assert cli.main(["gradcheck", "--instances", "1", "--tolerance", "1e-30"]) == 1

    def test_filter_identity(self, rng, tmp_path):
        pts = np.arange(10)[:, None] * 40.0 + rng.uniform(0, 1, size=(10, 4))
        sig = rng.normal(size=(10, 2))
        write_tensor(tmp_path / "f.bin", pts)
        write_tensor(tmp_path / "v.bin", sig)
        rc = cli.main(["filter", "--features", str(tmp_path / "f.bin"), "--signal",
                       str(tmp_path / "v.bin"), "--output", str(tmp_path / "o.bin"), "--identity"])
        assert rc == 0
        np.testing.assert_allclose(read_tensor(tmp_path / "o.bin"), sig, rtol=0, atol=1e-14)

    def test_filter_with_checkpoint(self, rng, tmp_path):
        pts = rng.uniform(0, 3, size=(30, 2))
        sig = rng.normal(size=30)
        write_tensor(tmp_path / "f.bin", pts)
        write_tensor(tmp_path / "v.bin", sig)
        write_checkpoint(tmp_path / "k.bin", gaussian_kernel(2, 1), [1.0, 1.0])
        args = ["filter", "--features", str(tmp_path / "f.bin"), "--signal", str(tmp_path / "v.bin"),
                "--output", str(tmp_path / "o.bin")]
        assert cli.main(args + ["--kernel", str(tmp_path / "k.bin")]) == 0
        a = read_tensor(tmp_path / "o.bin")
        assert cli.main(args + ["--gauss"]) == 0
        assert np.array_equal(a, read_tensor(tmp_path / "o.bin"))
        assert a.shape == (30,)

    def test_filter_format_error(self, tmp_path, capsys):
        (tmp_path / "f.bin").write_bytes(b"PHLT\x01\x00\x02\x00" + b"\x00" * 5)
        write_tensor(tmp_path / "v.bin", np.zeros(3))
        rc = cli.main(["filter", "--features", str(tmp_path / "f.bin"), "--signal",
                       str(tmp_path / "v.bin"), "--output", str(tmp_path / "o.bin")])
        assert rc == 2
        assert "at byte 8" in capsys.readouterr().err

    def test_filter_row_mismatch(self, tmp_path):
        write_tensor(tmp_path / "f.bin", np.zeros((4, 2)))
        write_tensor(tmp_path / "v.bin", np.zeros(3))
        rc = cli.main(["filter", "--features", str(tmp_path / "f.bin"), "--signal",
                       str(tmp_path / "v.bin"), "--output", str(tmp_path / "o.bin")])
        assert rc == 2

    def test_upsample_modes(self, rng, tmp_path, capsys):
        img = _write_pair(tmp_path, rng)
        base = ["upsample", "--factor", "2", "--guide", str(tmp_path / "guide.ppm"),
                "--low", str(tmp_path / "low.ppm"), "--reference", str(tmp_path / "guide.ppm")]
        for extra in ([], ["--bicubic"], ["--gauss"]):
            out = tmp_path / "out.ppm"
            assert cli.main(base + extra + ["--output", str(out)]) == 0
            assert read_image(out).shape == img.shape
        assert "PSNR" in capsys.readouterr().out
        assert cli.main(base + ["--min-psnr", "99"]) == 1

    def test_upsample_identity_factor_one(self, rng, tmp_path):
        img = rng.integers(0, 256, size=(8, 8, 3)) / 255.0
        write_image(tmp_path / "a.ppm", img)
        out = tmp_path / "o.ppm"
        rc = cli.main(["upsample", "--factor", "1", "--guide", str(tmp_path / "a.ppm"), "--low",
                       str(tmp_path / "a.ppm"), "--identity", "--position-scale", "5",
                       "--output", str(out)])
        assert rc == 0
        assert np.array_equal(read_image(out), img)

    def test_upsample_with_checkpoint(self, rng, tmp_path):
        _write_pair(tmp_path, rng)
        write_checkpoint(tmp_path / "k.bin", gaussian_kernel(3, 2), [0.13, 0.13, 0.17])
        rc = cli.main(["upsample", "--factor", "2", "--guide", str(tmp_path / "guide.ppm"),
                       "--low", str(tmp_path / "low.ppm"), "--kernel", str(tmp_path / "k.bin")])
        assert rc == 0
        write_checkpoint(tmp_path / "k3.bin", gaussian_kernel(3, 2, channels=3), [1.0, 1.0, 1.0])
        rc = cli.main(["upsample", "--factor", "2", "--guide", str(tmp_path / "guide.ppm"),
                       "--low", str(tmp_path / "low.ppm"), "--kernel", str(tmp_path / "k3.bin")])
        assert rc == 2

    def test_upsample_input_errors(self, rng, tmp_path):
        _write_pair(tmp_path, rng)
        assert cli.main(["upsample", "--factor", "4", "--guide", str(tmp_path / "guide.ppm"),
                         "--low", str(tmp_path / "low.ppm")]) == 2
        assert cli.main(["upsample", "--factor", "2", "--guide", str(tmp_path / "nope.ppm"),
                         "--low", str(tmp_path / "low.ppm")]) == 2
        (tmp_path / "bad.ppm").write_bytes(b"P6\n4 4\n255\n\x00")
        assert cli.main(["upsample", "--factor", "2", "--guide", str(tmp_path / "bad.ppm"),
                         "--low", str(tmp_path / "low.ppm")]) == 2

    def test_lattice_viz(self, rng, tmp_path, capsys):
        write_image(tmp_path / "img.ppm", rng.uniform(size=(10, 10, 3)))
        out = tmp_path / "viz.ppm"
        assert cli.main(["lattice-viz", "--image", str(tmp_path / "img.ppm"), "--features", "xy",
                         "--scale", "0.3", "--output", str(out)]) == 0
        assert read_image(out).shape == (10, 10, 3)
        assert "distinct cells" in capsys.readouterr().out

    def test_tiles_csv_deterministic(self, tmp_path):
        rows = []
        for name in ("a.csv", "b.csv"):
            rc = cli.main(["tiles", "--variant", "bnn", "--n-train", "20", "--n-val", "4",
                           "--n-test", "4", "--epochs", "2", "--batch", "10", "--seed", "3",
                           "--csv", str(tmp_path / name)])
            assert rc == 0
            with open(tmp_path / name) as fh:
                rows.append(list(csv.reader(fh)))
        assert rows[0] == rows[1]
        assert rows[0][0] == ["epoch", "train_loss", "val_iou"]
        assert len(rows[0]) == 3

    def test_crf_deterministic(self, capsys):
        outs = []
        for _ in range(2):
            cli.main(["crf", "--seeds", "1", "--epochs", "2", "--seed", "4"])
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1] and "median" in outs[0]

    def test_denoise_directory(self, rng, tmp_path, capsys):
        yy, xx = np.mgrid[:32, :32] / 32.0
        for i in range(4):
            img = 0.5 + 0.4 * np.sin((i + 1) * 3 * xx + 2 * yy)
            img[:, 16:] = np.clip(img[:, 16:] - 0.3, 0, 1)
            write_image(tmp_path / f"im{i}.pgm", img)
        rc = cli.main(["denoise", "--images", str(tmp_path), "--size", "32", "--gauss", "--learned"])
        text = capsys.readouterr().out
        assert rc in (0, 1)
        assert "gauss" in text and "learned" in text and "noisy" in text

    def test_denoise_too_few_images(self, rng, tmp_path):
        write_image(tmp_path / "only.pgm", rng.uniform(size=(32, 32)))
        assert cli.main(["denoise", "--images", str(tmp_path), "--size", "32"]) == 2

    def test_bad_arguments_exit_2(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["upsample"])
        assert e.value.code == 2
