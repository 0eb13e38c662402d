import numpy as np
import pytest
from PIL import Image

from featx.cli import main
from featx.extract import (
    ExtractError,
    ImageManifest,
    debug_mean_trunk,
    extract,
    preprocess,
    read_manifest,
)


def make_images(tmp_path, n=3, size=(40, 28)):
    rng = np.random.default_rng(0)
    paths = []
    for i in range(n):
        arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
        p = tmp_path / f"img{i}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths


def write_manifest(tmp_path, paths, name="manifest.txt"):
    m = tmp_path / name
    m.write_text("\n".join(str(p) for p in paths) + "\n", encoding="utf-8")
    return m


class TestPreprocess:
    def test_shape_and_dtype(self, tmp_path):
        (path,) = make_images(tmp_path, 1)
        with Image.open(path) as img:
            out = preprocess(img)
        assert out.shape == (3, 224, 224)
        assert out.dtype == np.float32

    def test_deterministic(self, tmp_path):
        (path,) = make_images(tmp_path, 1)
        with Image.open(path) as img:
            a = preprocess(img)
        with Image.open(path) as img:
            b = preprocess(img)
        assert np.array_equal(a, b)


class TestExtract:
    def test_three_images_2048(self, tmp_path):
        paths = make_images(tmp_path, 3)
        out = tmp_path / "feats.vgnf"
        manifest = ImageManifest(paths, out, model_name="debug-mean", batch_size=2)
        count, skipped = extract(manifest, trunk=debug_mean_trunk)
        assert count == 3 and skipped == []
        from vgnsl.corpus import load_features  # the primary-side loader

        feats = load_features(out)
        assert feats.shape == (3, 2048)

    def test_round_trips_through_primary_loader_in_manifest_order(self, tmp_path):
        paths = make_images(tmp_path, 4)
        out = tmp_path / "feats.vgnf"
        manifest = ImageManifest(paths, out, batch_size=3)
        extract(manifest, trunk=debug_mean_trunk)
        from vgnsl.corpus import load_features

        feats = load_features(out)
        for i, path in enumerate(paths):
            with Image.open(path) as img:
                expected = debug_mean_trunk(preprocess(img)[None])[0]
            assert np.array_equal(feats[i], expected)

    def test_repeated_runs_bit_identical(self, tmp_path):
        paths = make_images(tmp_path, 3)
        out1, out2 = tmp_path / "a.vgnf", tmp_path / "b.vgnf"
        extract(ImageManifest(paths, out1), trunk=debug_mean_trunk)
        extract(ImageManifest(paths, out2), trunk=debug_mean_trunk)
        assert out1.read_bytes() == out2.read_bytes()

    def test_abort_on_corrupt_image(self, tmp_path):
        paths = make_images(tmp_path, 2)
        bad = tmp_path / "broken.png"
        bad.write_text("not an image", encoding="utf-8")
        manifest = ImageManifest([paths[0], bad, paths[1]], tmp_path / "o.vgnf")
        with pytest.raises(ExtractError, match="broken.png"):
            extract(manifest, trunk=debug_mean_trunk)

    def test_skip_policy_drops_row(self, tmp_path):
        paths = make_images(tmp_path, 2)
        bad = tmp_path / "broken.png"
        bad.write_text("nope", encoding="utf-8")
        out = tmp_path / "o.vgnf"
        count, skipped = extract(
            ImageManifest([paths[0], bad, paths[1]], out),
            trunk=debug_mean_trunk, on_error="skip",
        )
        assert count == 2 and skipped == [bad]
        from vgnsl.corpus import load_features

        feats = load_features(out)
        with Image.open(paths[1]) as img:
            assert np.array_equal(feats[1], debug_mean_trunk(preprocess(img)[None])[0])

    def test_zero_policy_keeps_slot(self, tmp_path):
        paths = make_images(tmp_path, 2)
        bad = tmp_path / "broken.png"
        bad.write_text("nope", encoding="utf-8")
        out = tmp_path / "o.vgnf"
        count, skipped = extract(
            ImageManifest([paths[0], bad, paths[1]], out),
            trunk=debug_mean_trunk, on_error="zero",
        )
        assert count == 3 and skipped == [bad]
        from vgnsl.corpus import load_features

        feats = load_features(out)
        assert not feats[1].any()
        assert feats[0].any() and feats[2].any()

    def test_empty_manifest_rejected(self, tmp_path):
        with pytest.raises(ExtractError):
            ImageManifest([], tmp_path / "o.vgnf")

    def test_missing_path_rejected_up_front(self, tmp_path):
        with pytest.raises(ExtractError, match="missing image"):
            ImageManifest([tmp_path / "absent.png"], tmp_path / "o.vgnf")


class TestManifestFile:
    def test_relative_paths_and_comments(self, tmp_path):
        make_images(tmp_path, 2)
        m = tmp_path / "m.txt"
        m.write_text("# images\nimg0.png\n\nimg1.png\n", encoding="utf-8")
        manifest = read_manifest(m, tmp_path / "o.vgnf", "debug-mean", 4)
        assert [p.name for p in manifest.image_paths] == ["img0.png", "img1.png"]


class TestCli:
    def test_end_to_end_debug_model(self, tmp_path, capsys):
        paths = make_images(tmp_path, 3)
        m = write_manifest(tmp_path, paths)
        out = tmp_path / "feats.vgnf"
        assert main(["--manifest", str(m), "--out", str(out), "--model", "debug-mean"]) == 0
        assert "wrote 3 rows" in capsys.readouterr().out
        from vgnsl.corpus import load_features

        assert load_features(out).shape == (3, 2048)

    def test_cli_reruns_identical(self, tmp_path):
        paths = make_images(tmp_path, 3)
        m = write_manifest(tmp_path, paths)
        o1, o2 = tmp_path / "a.vgnf", tmp_path / "b.vgnf"
        assert main(["--manifest", str(m), "--out", str(o1), "--model", "debug-mean"]) == 0
        assert main(["--manifest", str(m), "--out", str(o2), "--model", "debug-mean"]) == 0
        assert o1.read_bytes() == o2.read_bytes()

    def test_cli_abort_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "broken.png"
        bad.write_text("nope", encoding="utf-8")
        m = write_manifest(tmp_path, [bad])
        code = main(["--manifest", str(m), "--out", str(tmp_path / "o.vgnf"),
                     "--model", "debug-mean"])
        assert code == 2
        assert "broken.png" in capsys.readouterr().err


@pytest.mark.slow
class TestResnetTrunk:
    def test_local_weights_path(self, tmp_path):
        torch = pytest.importorskip("torch")
        import torchvision.models as models

        from featx.extract import build_trunk

        net = models.resnet101(weights=None)
        weights = tmp_path / "resnet101.pt"
        torch.save(net.state_dict(), weights)

        trunk = build_trunk("resnet101", str(weights))
        paths = make_images(tmp_path, 2)
        out1, out2 = tmp_path / "a.vgnf", tmp_path / "b.vgnf"
        extract(ImageManifest(paths, out1, batch_size=2), trunk=trunk)
        extract(ImageManifest(paths, out2, batch_size=2), trunk=trunk)
        from vgnsl.corpus import load_features

        feats = load_features(out1)
        assert feats.shape == (2, 2048)
        assert out1.read_bytes() == out2.read_bytes()
