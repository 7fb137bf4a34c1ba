import os

import pytest

from swinvos.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestGen:
    def test_writes_sequence(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen", "--out", str(tmp_path / "seq"),
                           "--frames", "3", "--size", "64", "--objects", "2")
        assert code == 0
        assert "seed=0" in out
        assert sorted(os.listdir(tmp_path / "seq" / "frames")) == [
            "00000.ppm", "00001.ppm", "00002.ppm"]
        assert len(os.listdir(tmp_path / "seq" / "masks")) == 3

    def test_reproducible_bytes(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(capsys, "gen", "--out", str(tmp_path / name), "--frames", "2",
                "--seed", "5")
        a = (tmp_path / "a" / "frames" / "00001.ppm").read_bytes()
        b = (tmp_path / "b" / "frames" / "00001.ppm").read_bytes()
        assert a == b

    def test_unknown_flag_rejected(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen", "--out", str(tmp_path / "s"), "--bogus")
        assert code == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train")
    seq = root / "seq"
    ckpt = root / "model.hst"
    assert main(["gen", "--out", str(seq), "--frames", "4", "--size", "64",
                 "--objects", "1", "--seed", "3"]) == 0
    assert main(["train-toy", "--seq", str(seq), "--steps", "8", "--lr", "1e-3",
                 "--ckpt", str(ckpt), "--k", "16"]) == 0
    return root, seq, ckpt


class TestTrainToy:
    def test_outputs_exist(self, trained):
        root, _, ckpt = trained
        assert ckpt.exists()
        loss = ckpt.with_name(ckpt.name + ".loss.csv")
        lines = loss.read_text().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 9

    def test_dump_config(self, capsys):
        code, out, _ = run(capsys, "train-toy", "--ckpt", "/dev/null",
                           "--dump-config", "--k", "7")
        assert code == 0
        assert "variant=nano" in out and "k=7" in out

    def test_reproducible_checkpoint(self, tmp_path, capsys):
        seq = tmp_path / "seq"
        run(capsys, "gen", "--out", str(seq), "--frames", "4", "--size", "64")
        paths = []
        for name in ("m1.hst", "m2.hst"):
            ckpt = tmp_path / name
            code, _, _ = run(capsys, "train-toy", "--seq", str(seq), "--steps",
                             "3", "--ckpt", str(ckpt), "--k", "8")
            assert code == 0
            paths.append(ckpt)
        assert paths[0].read_bytes() == paths[1].read_bytes()


class TestInferAndEval:
    def test_infer_writes_masks_and_timing(self, trained, capsys):
        root, seq, ckpt = trained
        out_dir = root / "pred"
        code, out, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--seq", str(seq),
                           "--out", str(out_dir), "--k", "16")
        assert code == 0
        names = sorted(os.listdir(out_dir))
        assert names == ["00001.pgm", "00002.pgm", "00003.pgm", "timing.csv"]
        timing = (out_dir / "timing.csv").read_text().splitlines()
        assert timing[0] == "frame,wall_s"
        assert len(timing) == 5

    def test_infer_firstprev_policy(self, trained, capsys):
        root, seq, ckpt = trained
        code, _, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--seq", str(seq),
                         "--out", str(root / "pred_fp"), "--k", "16",
                         "--memory", "firstprev")
        assert code == 0

    def test_infer_variant_mismatch_refused(self, trained, capsys):
        root, seq, ckpt = trained
        code, _, err = run(capsys, "infer", "--ckpt", str(ckpt), "--seq", str(seq),
                           "--out", str(root / "x"), "--variant", "T")
        assert code == 1
        assert "variant" in err

    def test_infer_missing_sequence_is_data_error(self, trained, capsys):
        root, _, ckpt = trained
        code, _, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--seq",
                         str(root / "nothing"), "--out", str(root / "y"))
        assert code == 2

    def test_infer_missing_checkpoint_is_data_error(self, trained, capsys):
        root, seq, _ = trained
        code, _, err = run(capsys, "infer", "--ckpt", str(root / "missing.hst"),
                           "--seq", str(seq), "--out", str(root / "z"))
        assert code == 2
        assert "error:" in err

    def test_infer_read_mode_switch(self, trained, capsys):
        root, seq, ckpt = trained
        code, _, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--seq", str(seq),
                         "--out", str(root / "pred_ls"), "--k", "16",
                         "--read-mode", "last_stage_only")
        assert code == 0
        assert (root / "pred_ls" / "00001.pgm").exists()

    def test_eval_reports_tsv(self, trained, capsys):
        root, seq, ckpt = trained
        pred = root / "pred_eval"
        run(capsys, "infer", "--ckpt", str(ckpt), "--seq", str(seq),
            "--out", str(pred), "--k", "16")
        code, out, _ = run(capsys, "eval", "--pred", str(pred), "--gt", str(seq))
        assert code == 0
        lines = [l for l in out.splitlines() if "\t" in l]
        assert lines[0] == "object\tframe\tJ\tF"
        assert lines[-1].startswith("J&F\t")
        assert lines[-2].startswith("mean\t")

    def test_eval_to_file(self, trained, capsys):
        root, seq, ckpt = trained
        pred = root / "pred_eval2"
        run(capsys, "infer", "--ckpt", str(ckpt), "--seq", str(seq),
            "--out", str(pred), "--k", "16")
        out_file = root / "report.tsv"
        code, _, _ = run(capsys, "eval", "--pred", str(pred), "--gt", str(seq),
                         "--out", str(out_file))
        assert code == 0
        assert out_file.read_text().startswith("object\tframe\tJ\tF\n")


class TestGradcheckCommand:
    def test_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        assert code == 0
        assert "matmul" in out and "FAIL" not in out


class TestBenchCommand:
    def test_csv_structure(self, tmp_path, capsys):
        out_csv = tmp_path / "bench.csv"
        code, _, _ = run(capsys, "bench-memread", "--height", "64", "--width", "64",
                         "--t", "2", "--dim", "8", "--k", "4", "--out", str(out_csv))
        assert code == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "stage,mode,k,T,H,W,flops,wall_ns"
        assert any(line.startswith("all,dense_all") for line in lines)
        assert any(line.startswith("all,hierarchical_topk") for line in lines)

    def test_bad_extents(self, capsys):
        code, _, _ = run(capsys, "bench-memread", "--height", "60", "--width", "64")
        assert code == 1
