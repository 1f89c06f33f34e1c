"""End-to-end runs of the command-line tool on a tiny configuration."""
import numpy as np
import pytest

from segdet import metrics, phantom
from segdet.checkpoint import load_checkpoint
from segdet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

TINY = """
data.n_train = 2
data.n_test = 2
data.dims = 8, 16, 16
data.radius_range = 2, 2.5
data.distractors = 1
rpn.backbone_channels = 4, 4, 4
rpn.head_channels = 8
rpn.score_thresh = 0.3
unet.depth = 2
unet.base_channels = 2
train.rpn_iters = 6
train.seg_iters = 4
train.checkpoint_every = 2
train.rpn_log_every = 1
train.rpn_slices_per_batch = 4
train.val_phantoms = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == EXIT_OK
    assert main(["train-rpn", "--config", str(cfg), "--manifest", str(root / "data" / "manifest.tsv"),
                 "--out", str(root / "rpn")]) == EXIT_OK
    return root


def run(ws, *args):
    return main([args[0], "--config", str(ws / "tiny.cfg")] + list(args[1:]))


def manifest(ws):
    return str(ws / "data" / "manifest.tsv")


class TestGenData:
    def test_default_counts(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path)]) == EXIT_OK
        files = sorted(p.name for p in tmp_path.iterdir())
        assert sum(f.endswith("_vol.svol") for f in files) == 19
        assert sum(f.endswith("_lab.svol") for f in files) == 19
        assert "manifest.tsv" in files and len(files) == 39

    def test_same_seed_same_bytes_other_seed_differs(self, workspace, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(workspace, "gen-data", "--out", str(a)) == EXIT_OK
        assert run(workspace, "gen-data", "--seed", "1", "--out", str(b)) == EXIT_OK
        for p in (workspace / "data").iterdir():
            assert (a / p.name).read_bytes() == p.read_bytes()
        assert (a / "manifest.tsv").read_text() != (b / "manifest.tsv").read_text()


class TestTrainRpn:
    def test_outputs(self, workspace):
        out = workspace / "rpn"
        assert load_checkpoint(out / "rpn.sgck").iteration == 6
        assert (out / "rpn_iter2.sgck").exists() and (out / "rpn_iter4.sgck").exists()
        assert len(metrics.read_loss_curve(out / "loss_rpn.tsv")) == 6

    def test_single_iteration(self, workspace, tmp_path):
        assert run(workspace, "train-rpn", "--manifest", manifest(workspace), "--out", str(tmp_path),
                   "--set", "train.rpn_iters=1") == EXIT_OK
        assert load_checkpoint(tmp_path / "rpn.sgck").iteration == 1

    def test_resume_equals_uninterrupted(self, workspace, tmp_path):
        assert run(workspace, "train-rpn", "--manifest", manifest(workspace), "--out", str(tmp_path),
                   "--set", "train.rpn_iters=4") == EXIT_OK
        assert run(workspace, "train-rpn", "--manifest", manifest(workspace), "--out", str(tmp_path),
                   "--resume", str(tmp_path / "rpn.sgck")) == EXIT_OK
        full = workspace / "rpn"
        assert (tmp_path / "rpn.sgck").read_bytes() == (full / "rpn.sgck").read_bytes()
        assert (tmp_path / "loss_rpn.tsv").read_text() == (full / "loss_rpn.tsv").read_text()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_exits_3(self, workspace, tmp_path):
        code = run(workspace, "train-rpn", "--manifest", manifest(workspace), "--out", str(tmp_path),
                   "--set", "sgd.lr=1e30")
        assert code == EXIT_NUMERIC


class TestTrainSeg:
    def test_plain_has_one_input_channel(self, workspace, tmp_path):
        assert run(workspace, "train-seg", "--manifest", manifest(workspace), "--mode", "plain",
                   "--out", str(tmp_path)) == EXIT_OK
        ck = load_checkpoint(tmp_path / "seg_plain.sgck")
        assert ck.tensors["down.0.conv1.weight"].shape[1] == 1
        assert ck.meta["mode"] == "plain" and ck.iteration == 4
        assert (tmp_path / "seg_plain.best.sgck").exists()
        assert len(metrics.read_loss_curve(tmp_path / "val_plain.tsv")) == 2

    def test_attention_needs_detector(self, workspace, tmp_path):
        assert run(workspace, "train-seg", "--manifest", manifest(workspace), "--out", str(tmp_path)) == EXIT_USAGE

    def test_gt_attention_flag(self, workspace, tmp_path):
        assert run(workspace, "train-seg", "--manifest", manifest(workspace), "--gt-attention",
                   "--out", str(tmp_path)) == EXIT_OK
        ck = load_checkpoint(tmp_path / "seg_attention.sgck")
        assert ck.tensors["down.0.conv1.weight"].shape[1] == 2
        assert ck.meta["gt_attention"] == "True"

    @pytest.mark.parametrize("mode", ["attention", "mask3d"])
    def test_resume_equals_uninterrupted(self, workspace, tmp_path, mode):
        rpn = str(workspace / "rpn" / "rpn.sgck")
        full, part = tmp_path / "full", tmp_path / "part"
        args = ["--manifest", manifest(workspace), "--mode", mode, "--rpn", rpn]
        assert run(workspace, "train-seg", *args, "--out", str(full)) == EXIT_OK
        assert run(workspace, "train-seg", *args, "--out", str(part), "--set", "train.seg_iters=2") == EXIT_OK
        assert run(workspace, "train-seg", *args, "--out", str(part),
                   "--resume", str(part / f"seg_{mode}.sgck")) == EXIT_OK
        for name in (f"seg_{mode}.sgck", f"seg_{mode}.best.sgck", f"loss_{mode}.tsv", f"val_{mode}.tsv"):
            assert (part / name).read_bytes() == (full / name).read_bytes(), name


@pytest.fixture(scope="module")
def seg(workspace):
    out = workspace / "seg"
    assert run(workspace, "train-seg", "--manifest", manifest(workspace), "--rpn",
               str(workspace / "rpn" / "rpn.sgck"), "--out", str(out)) == EXIT_OK
    return out / "seg_attention.sgck"


class TestInferEval:
    def test_infer_deterministic(self, workspace, seg, tmp_path):
        vol = next((workspace / "data").glob("test_00_*_vol.svol"))
        rpn = str(workspace / "rpn" / "rpn.sgck")
        for prefix in ("a", "b"):
            assert run(workspace, "infer", "--volume", str(vol), "--seg", str(seg), "--rpn", rpn,
                       "--out", str(tmp_path / prefix)) == EXIT_OK
        for suffix in ("_labels.svol", "_attention.svol"):
            assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
        labels = phantom.read_svol(tmp_path / "a_labels.svol")
        assert labels.shape == (8, 16, 16) and set(np.unique(labels)) <= {0.0, 1.0}

    def test_infer_zero_volume(self, workspace, seg, tmp_path):
        vol = tmp_path / "zero.svol"
        phantom.write_svol(vol, np.zeros((8, 16, 16), dtype=np.float32))
        assert run(workspace, "infer", "--volume", str(vol), "--seg", str(seg), "--rpn",
                   str(workspace / "rpn" / "rpn.sgck"), "--out", str(tmp_path / "z")) == EXIT_OK
        assert phantom.read_svol(tmp_path / "z_labels.svol").shape == (8, 16, 16)

    def test_infer_shape_mismatch(self, workspace, seg, tmp_path):
        vol = tmp_path / "odd.svol"
        phantom.write_svol(vol, np.zeros((6, 16, 16), dtype=np.float32))
        assert run(workspace, "infer", "--volume", str(vol), "--seg", str(seg), "--rpn",
                   str(workspace / "rpn" / "rpn.sgck"), "--out", str(tmp_path / "o")) == EXIT_DATA

    def test_eval_report(self, workspace, seg, tmp_path):
        assert run(workspace, "eval", "--manifest", manifest(workspace), "--seg", str(seg), "--rpn",
                   str(workspace / "rpn" / "rpn.sgck"), "--out", str(tmp_path)) == EXIT_OK
        kv = metrics.read_kv(tmp_path / "report_attention.tsv")
        ious = [float(kv[f"iou_{i}"]) for i in range(int(kv["n"]))]
        assert int(kv["n"]) == 2
        assert float(kv["mean"]) == pytest.approx(sum(ious) / len(ious), abs=1e-9)

    def test_mode_mismatch(self, workspace, seg, tmp_path):
        assert run(workspace, "eval", "--manifest", manifest(workspace), "--seg", str(seg), "--mode", "plain",
                   "--out", str(tmp_path)) == EXIT_USAGE


class TestCompare:
    def test_table_and_curves(self, workspace, tmp_path, capsys):
        assert run(workspace, "compare", "--manifest", manifest(workspace), "--out", str(tmp_path)) == EXIT_OK
        rows = (tmp_path / "comparison.txt").read_text().splitlines()[2:]
        assert [r[:14].strip() for r in rows] == ["3D U-Net", "3D mask", "2D attention"]
        assert all(len(r.split()[-3:]) == 3 for r in rows)
        for mode in ("plain", "mask3d", "attention"):
            assert len(metrics.read_loss_curve(tmp_path / f"loss_{mode}.tsv")) == 4

    def test_repeat_is_byte_identical(self, workspace, tmp_path):
        for d in ("a", "b"):
            assert run(workspace, "compare", "--manifest", manifest(workspace), "--out", str(tmp_path / d)) == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n


class TestErrors:
    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("rpn.bogus = 1\n")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_bad_arguments(self, tmp_path):
        assert main(["train-seg", "--out", str(tmp_path)]) == EXIT_USAGE
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_missing_manifest(self, tmp_path):
        assert main(["train-rpn", "--manifest", str(tmp_path / "none.tsv"), "--out", str(tmp_path)]) == EXIT_DATA

    def test_corrupt_volume(self, workspace, tmp_path):
        data = tmp_path / "data"
        data.mkdir()
        for p in (workspace / "data").iterdir():
            (data / p.name).write_bytes(p.read_bytes())
        victim = next(data.glob("train_00_*_vol.svol"))
        victim.write_bytes(victim.read_bytes()[:100])
        code = run(workspace, "train-rpn", "--manifest", str(data / "manifest.tsv"), "--out", str(tmp_path / "o"))
        assert code == EXIT_DATA
