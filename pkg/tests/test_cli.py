import numpy as np
import pytest
from PIL import Image

from oracles import angle_deg, random_stain_matrix
from stainvol.cli import EXIT_DIVERGED, EXIT_INPUT, EXIT_OK, augment_candidates, main
from stainvol.discriminator import DiscriminatorNet
from stainvol.stain_model import StainModel, beer_lambert_forward, remix, to_uint8, unmix
from stainvol.synthetic import render_concentrations, render_image
from stainvol.volume import ConcentrationVolume, read_scv, write_scv

FAST_TRAIN = ["--iters", "2", "--batch-size", "8", "--k-steps", "1", "--harvest-size", "2",
              "--patches-per-image", "4", "--seed", "3"]


def save_png(path, rgb):
    Image.fromarray(rgb).save(path)
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    data.mkdir()
    rng = np.random.default_rng(0)
    for k in range(4):
        save_png(data / f"img{k}.png", render_image(40, rng))
    patches = root / "patches"
    patches.mkdir()
    for k in range(2):
        save_png(patches / f"p{k}.png", render_image(24, rng))
    StainModel().save(root / "he.stains")
    DiscriminatorNet(seed=0).save(root / "init.disc")
    return root


@pytest.fixture(scope="module")
def easy_disc(workdir):
    net = DiscriminatorNet(seed=0)
    net.net.layers[-1].bias.data[...] = [-30.0, 30.0]      # converges at iteration 0
    net.save(workdir / "easy.disc")
    return "easy.disc"


def read_png(path):
    return np.asarray(Image.open(path))


class TestEstimateStains:
    def test_recovers_known_matrix(self, tmp_path, capsys):
        rng = np.random.default_rng(7)
        truth = random_stain_matrix(rng)
        c = rng.uniform(0, 2, (64, 64, 2))
        img = save_png(tmp_path / "in.png", to_uint8(beer_lambert_forward(c, StainModel(truth))))
        assert main(["estimate-stains", "--input", str(img), "--out", str(tmp_path / "s.txt")]) == EXIT_OK
        printed = [line.split() for line in capsys.readouterr().out.splitlines()[1:]]
        est = np.array(printed, dtype=float)
        for j in range(2):
            assert angle_deg(est[:, j], truth[:, j]) < 2.0
        np.testing.assert_allclose(StainModel.load(tmp_path / "s.txt").A, est, atol=1e-6)

    def test_blank_image(self, tmp_path, capsys):
        img = save_png(tmp_path / "blank.png", np.full((32, 32, 3), 255, np.uint8))
        assert main(["estimate-stains", "--input", str(img), "--out", str(tmp_path / "s.txt")]) == EXIT_INPUT
        assert "error" in capsys.readouterr().err
        assert not (tmp_path / "s.txt").exists()

    def test_idempotent(self, workdir, tmp_path):
        img = str(workdir / "data" / "img0.png")
        for name in ("a", "b"):
            main(["estimate-stains", "--input", img, "--out", str(tmp_path / name)])
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_unreadable_image(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not a png")
        assert main(["estimate-stains", "--input", str(bad), "--out", str(tmp_path / "s")]) == EXIT_INPUT


class TestTrain:
    def test_zero_iters_checkpoint(self, workdir, tmp_path):
        out = tmp_path / "net.disc"
        assert main(["train", "--data", str(workdir / "data"), "--out", str(out), "--iters", "0",
                     "--seed", "4"]) == EXIT_OK
        loaded = DiscriminatorNet.load(out)
        fresh = DiscriminatorNet(seed=4)
        for name, arr in fresh.state().items():
            np.testing.assert_array_equal(loaded.state()[name], arr)
        assert (tmp_path / "net.disc.log").read_text().count("\n") == 1

    def test_same_seed_identical(self, workdir, tmp_path):
        for name in ("a", "b"):
            assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path / name)]
                        + FAST_TRAIN) == EXIT_OK
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        log = (tmp_path / "a.log").read_text()
        assert log == (tmp_path / "b.log").read_text()
        assert len(log.splitlines()) == 3

    def test_config_file_used(self, workdir, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("iters = 1\nbatch_size = 8\nk_steps = 1\nharvest_size = 2\npatches_per_image = 4\n")
        assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path / "n"),
                     "--config", str(cfg)]) == EXIT_OK
        assert len((tmp_path / "n.log").read_text().splitlines()) == 2

    def test_unknown_config_key(self, workdir, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("itres = 1\n")
        assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path / "n"),
                     "--config", str(cfg)]) == EXIT_INPUT

    def test_empty_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "n")]) == EXIT_INPUT


def _infer(workdir, image, out, *extra):
    return main(["infer", "--input", str(image), "--stains", str(workdir / "he.stains"),
                 "--disc", str(workdir / "init.disc"), "--out", str(out), "--max-iters", "2", *extra])


class TestInfer:
    def test_patch_dims_and_z_view(self, workdir, tmp_path, capsys):
        img = workdir / "patches" / "p0.png"
        assert _infer(workdir, img, tmp_path / "v.scv", "--views-out", str(tmp_path / "views")) == EXIT_OK
        summary = capsys.readouterr().out
        assert "iterations=" in summary and "converged=" in summary
        vol = read_scv(tmp_path / "v.scv")
        assert vol.data.shape == (24, 24, 24, 2)
        rgb = read_png(img)
        expected = to_uint8(remix(unmix(rgb, StainModel()), StainModel()))
        np.testing.assert_array_equal(read_png(tmp_path / "views" / "view_z_0.png"), expected)

    def test_large_image_dims(self, workdir, tmp_path):
        img = save_png(tmp_path / "big.png", render_image(64, np.random.default_rng(3)))
        assert _infer(workdir, img, tmp_path / "v.scv", "--max-iters", "1") == EXIT_OK
        assert read_scv(tmp_path / "v.scv").data.shape == (64, 64, 24, 2)

    def test_deterministic(self, workdir, tmp_path):
        img = workdir / "patches" / "p1.png"
        _infer(workdir, img, tmp_path / "a.scv")
        _infer(workdir, img, tmp_path / "b.scv")
        assert (tmp_path / "a.scv").read_bytes() == (tmp_path / "b.scv").read_bytes()

    def test_too_small(self, workdir, tmp_path):
        img = save_png(tmp_path / "s.png", render_image(16, np.random.default_rng(1)))
        assert _infer(workdir, img, tmp_path / "v.scv") == EXIT_INPUT

    def test_divergence_exit_code(self, workdir, tmp_path):
        net = DiscriminatorNet(seed=0)
        net.net.layers[-1].weight.data[...] = np.nan
        net.save(tmp_path / "nan.disc")
        code = main(["infer", "--input", str(workdir / "patches" / "p0.png"), "--stains",
                     str(workdir / "he.stains"), "--disc", str(tmp_path / "nan.disc"),
                     "--out", str(tmp_path / "v.scv")])
        assert code == EXIT_DIVERGED
        assert np.all(np.isfinite(read_scv(tmp_path / "v.scv").data))


class TestProject:
    def _run(self, workdir, vol_path, out, views="x,y,z"):
        return main(["project", "--volume", str(vol_path), "--stains", str(workdir / "he.stains"),
                     "--views", views, "--out", str(out)])

    def test_zero_volume_white(self, workdir, tmp_path):
        write_scv(tmp_path / "z.scv", ConcentrationVolume(np.zeros((24, 48, 24, 2))))
        assert self._run(workdir, tmp_path / "z.scv", tmp_path / "out") == EXIT_OK
        names = sorted(p.name for p in (tmp_path / "out").iterdir())
        assert names == ["view_x_0.png", "view_x_12.png", "view_x_24.png", "view_y_0.png", "view_z_0.png"]
        for p in (tmp_path / "out").iterdir():
            assert np.all(read_png(p) == 255)

    def test_symmetric_volume(self, workdir, tmp_path):
        rng = np.random.default_rng(2)
        data = rng.uniform(0, 0.05, (40, 40, 24, 2))
        data = 0.5 * (data + data.transpose(1, 0, 2, 3))
        write_scv(tmp_path / "s.scv", ConcentrationVolume(data))
        assert self._run(workdir, tmp_path / "s.scv", tmp_path / "out", "x,y") == EXIT_OK
        xs = sorted(p.name[len("view_x_"):] for p in (tmp_path / "out").glob("view_x_*"))
        ys = sorted(p.name[len("view_y_"):] for p in (tmp_path / "out").glob("view_y_*"))
        assert xs == ys == sorted(f"{o}.png" for o in (0, 12, 16))
        for suffix in xs:
            np.testing.assert_array_equal(read_png(tmp_path / "out" / f"view_x_{suffix}"),
                                          read_png(tmp_path / "out" / f"view_y_{suffix}"))

    def test_corrupt_volume(self, workdir, tmp_path):
        (tmp_path / "bad.scv").write_bytes(b"SCV1" + b"\x00" * 7)
        assert self._run(workdir, tmp_path / "bad.scv", tmp_path / "out") == EXIT_INPUT

    def test_unknown_view(self, workdir, tmp_path):
        write_scv(tmp_path / "z.scv", ConcentrationVolume(np.zeros((24, 24, 24, 2))))
        assert self._run(workdir, tmp_path / "z.scv", tmp_path / "out", "x,w") == EXIT_INPUT


class TestAugment:
    def _run(self, workdir, out, count, disc="init.disc", *extra):
        return main(["augment", "--data", str(workdir / "patches"), "--disc", str(workdir / disc),
                     "--out", str(out), "--count", str(count), *extra])

    def test_zero_count_manifest_only(self, workdir, tmp_path):
        assert self._run(workdir, tmp_path / "aug", 0) == EXIT_OK
        assert [p.name for p in (tmp_path / "aug").iterdir()] == ["manifest.tsv"]
        assert (tmp_path / "aug" / "manifest.tsv").read_text().count("\n") == 1

    def test_counts_and_integrity(self, workdir, tmp_path, easy_disc):
        out = tmp_path / "aug"
        assert self._run(workdir, out, 3, easy_disc, "--stains-per-image") == EXIT_OK
        rows = [line.split("\t") for line in (out / "manifest.tsv").read_text().splitlines()[1:]]
        assert len(rows) == 2 * 3
        for name, source, axis, offset, transposed in rows:
            assert (out / name).is_file() and np.asarray(Image.open(source)).shape == (24, 24, 3)
            assert axis in ("x", "y") and offset == "0" and transposed in ("0", "1")
        assert len(list(out.glob("*.png"))) == 6

    def test_deterministic_and_parallel(self, workdir, tmp_path, easy_disc):
        self._run(workdir, tmp_path / "a", 2, easy_disc)
        self._run(workdir, tmp_path / "b", 2, easy_disc, "--jobs", "2")
        manifest = [(tmp_path / d / "manifest.tsv").read_text() for d in "ab"]
        assert manifest[0] == manifest[1]
        for path in (tmp_path / "a").glob("*.png"):
            assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()

    def test_too_many_views(self, workdir, tmp_path, easy_disc):
        assert self._run(workdir, tmp_path / "aug", 5, easy_disc) == EXIT_INPUT

    def test_candidates(self):
        vol = ConcentrationVolume(np.zeros((24, 26, 24, 2)))
        cands = augment_candidates(vol)
        assert len(cands) == 2 * (3 + 1)
        assert len(set(cands)) == len(cands)
