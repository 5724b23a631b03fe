import csv
import io

import numpy as np
import pytest

from lbq import cli
from lbq.container import read_container
from lbq.pipeline import forward, load_checkpoint
from lbq.qgemm import payload_bytes

FAST_CALIB = ["--calib-samples", "2", "--calib-len", "16"]
FAST_EVAL = ["--prompts", "2", "--prompt-len", "8", "--max-new", "4"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


@pytest.fixture
def fp_ckpt(tmp_path, capsys):
    path = tmp_path / "fp.lbq"
    assert run(capsys, "init-toy", path, "--seed", 1)[0] == 0
    return path


def test_quantize_then_forward(fp_ckpt, tmp_path, capsys):
    out = tmp_path / "q.lbq"
    code, text, _ = run(capsys, "quantize", fp_ckpt, out, *FAST_CALIB)
    assert code == 0
    table = rows(text)
    assert table[0] == ["layer", "mse", "max_abs_err"] and len(table) == 1 + 12
    model = load_checkpoint(out)
    logits = forward(model, [1, 2, 3])
    assert logits.shape == (3, model.config.vocab) and np.isfinite(logits).all()


def test_quantize_hadamard_metadata(fp_ckpt, tmp_path, capsys):
    out = tmp_path / "q.lbq"
    assert run(capsys, "quantize", fp_ckpt, out, "--scheme", "w4a8", "--hadamard", *FAST_CALIB)[0] == 0
    meta = read_container(out).metadata
    assert meta["scheme"] == "w4a8" and meta["options"]["hadamard"] is True
    assert all(info["hadamard_block"] == 64 for name, info in meta["layers"].items() if "mlp_down" not in name)
    assert meta["layers"]["layer0.mlp_down"]["hadamard_block"] == 256


def test_quantize_smooth_and_text_calibration(fp_ckpt, tmp_path, capsys):
    text = tmp_path / "calib.txt"
    text.write_text("some calibration text " * 20, encoding="utf-8")
    out = tmp_path / "q.lbq"
    code, _, _ = run(capsys, "quantize", fp_ckpt, out, "--smooth", "0.5", "--calib", text, "--calib-len", "32")
    assert code == 0
    assert read_container(out).metadata["layers"]["layer0.attn_q"]["smooth_alpha"] == 0.5


def test_quantize_is_deterministic(fp_ckpt, tmp_path, capsys):
    outs = []
    for i in range(2):
        out = tmp_path / f"q{i}.lbq"
        run(capsys, "quantize", fp_ckpt, out, "--scheme", "w4a8", "--smooth", "0.5", "--hadamard",
            "--group-size", "32", "--seed", 5, *FAST_CALIB)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_quantize_errors(fp_ckpt, tmp_path, capsys):
    q = tmp_path / "q.lbq"
    assert run(capsys, "quantize", tmp_path / "missing.lbq", q)[0] == 2
    bad = tmp_path / "bad.lbq"
    bad.write_bytes(b"nope" * 8)
    assert run(capsys, "quantize", bad, q)[0] == 2
    code, _, err = run(capsys, "quantize", fp_ckpt, q, "--scheme", "w8a8", "--group-size", "32", *FAST_CALIB)
    assert code == 1 and "w4a8" in err
    run(capsys, "quantize", fp_ckpt, q, *FAST_CALIB)
    assert run(capsys, "quantize", q, tmp_path / "qq.lbq")[0] == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["quantize", str(fp_ckpt), str(q), "--scheme", "w2"])
    assert exc.value.code == 1


def test_eval_fp32_self_comparison(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert run(capsys, "eval-toy", "--precision", "fp32", *FAST_EVAL, "--out", out)[0] == 0
    report = dict(rows(out.read_text()))
    assert float(report["mean_rel_logit_error"]) == 0.0
    assert float(report["token_divergence_rate"]) == 0.0
    assert 0.0 <= float(report["repetition_ratio"]) <= 100.0


def test_eval_is_deterministic(tmp_path, capsys):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        run(capsys, "eval-toy", "--precision", "w4a8", "--hadamard", "--seed", 3, *FAST_EVAL, "--out", p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert float(dict(rows(paths[0].read_text()))["mean_rel_logit_error"]) > 0


def test_eval_from_checkpoint(fp_ckpt, capsys):
    code, text, _ = run(capsys, "eval-toy", "--ckpt", fp_ckpt, *FAST_EVAL)
    assert code == 0 and rows(text)[0] == ["metric", "value"]


def test_eval_config_error(capsys):
    assert run(capsys, "eval-toy", "--precision", "fp32", "--hadamard", *FAST_EVAL)[0] == 1


def test_seed_env_fallback(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("LBQ_SEED", "7")
    run(capsys, "init-toy", tmp_path / "env.lbq")
    run(capsys, "init-toy", tmp_path / "flag.lbq", "--seed", 7)
    assert (tmp_path / "env.lbq").read_bytes() == (tmp_path / "flag.lbq").read_bytes()
    assert load_checkpoint(tmp_path / "env.lbq").config.seed == 7
    monkeypatch.setenv("LBQ_SEED", "x")
    assert run(capsys, "init-toy", tmp_path / "bad.lbq")[0] == 1


def test_bench_csv(capsys):
    code, text, _ = run(capsys, "bench", "--m", "2,4", "--n", 64, "--k", 128, "--iters", 2, "--group-size", 32)
    assert code == 0
    table = list(csv.DictReader(io.StringIO(text)))
    assert len(table) == 8
    for r in table:
        assert int(r["wall_ns"]) > 0
        assert float(r["check_rel_err"]) <= cli.CHECK_TOL[r["kernel"]]
        assert int(r["payload_bytes"]) == int(r["weight_bytes"]) + int(r["act_bytes"]) + int(r["scale_bytes"])
    by = {(r["kernel"], r["m"]): r for r in table}
    assert by[("f32", "2")]["weight_bytes"] == str(128 * 64 * 4)
    assert by[("w8a8_opt", "2")]["weight_bytes"] == str(128 * 64)
    assert by[("w4a8_ref", "2")]["weight_bytes"] == str(128 * 64 // 2)


def test_bench_weight_payloads_at_1024():
    sizes = {kernel: payload_bytes(kernel, 1, 1024, 1024)["weight_bytes"] for kernel in ("f32", "w8a8_ref", "w4a8_ref")}
    assert sizes == {"f32": 4_194_304, "w8a8_ref": 1_048_576, "w4a8_ref": 524_288}


def test_bench_rejects_bad_input(capsys):
    assert run(capsys, "bench", "--k", 131072, "--n", 1, "--m", 1)[0] == 1
    assert run(capsys, "bench", "--kernels", "fp8")[0] == 1
    assert run(capsys, "bench", "--m", "0")[0] == 1
    assert run(capsys, "bench", "--k", 100, "--group-size", 32)[0] == 1


def test_bench_refuses_failing_kernel(capsys, monkeypatch):
    timed = []

    def broken(aq, wq):
        timed.append(1)
        return np.zeros((aq.shape[0], wq.shape[1]), np.float32) + 1.0

    monkeypatch.setattr(cli, "gemm_w8a8_opt", broken)
    code, out, err = run(capsys, "bench", "--m", 2, "--n", 16, "--k", 32, "--kernels", "w8a8_opt", "--iters", 3)
    assert code == 3 and "correctness" in err and out == ""
    assert len(timed) == 1


def test_analyze_channel_stats(fp_ckpt, tmp_path, capsys):
    rotated = tmp_path / "r.lbq"
    run(capsys, "quantize", fp_ckpt, rotated, "--hadamard", *FAST_CALIB)
    ratios = []
    for ckpt in (fp_ckpt, rotated):
        code, text, _ = run(capsys, "analyze", "--channel-stats", ckpt, "layer0.attn_q")
        assert code == 0
        ratios.append(float(dict(r for r in rows(text) if r[0].startswith("summary"))["summary_ratio"]))
    assert ratios[1] < ratios[0]
    assert run(capsys, "analyze", "--channel-stats", fp_ckpt, "layer9.attn_q")[0] == 2


def test_analyze_word_counts(tmp_path, capsys):
    f = tmp_path / "t.txt"
    f.write_text("a b c\n\none two\n", encoding="utf-8")
    code, text, _ = run(capsys, "analyze", "--word-counts", f)
    table = rows(text)
    assert code == 0 and table[1:4] == [["0", "3"], ["1", "0"], ["2", "2"]]
    assert [r[0] for r in table[4:]] == ["summary_mean", "summary_median", "summary_p95"]
    assert run(capsys, "analyze", "--word-counts", tmp_path / "none.txt")[0] == 2


def test_analyze_repetition(tmp_path, capsys):
    lines = ["x y x y x y"] * 3 + [f"sample {i} ends normally" for i in range(7)]
    f = tmp_path / "gen.txt"
    f.write_text("\n".join(lines) + "\n", encoding="utf-8")
    passed = tmp_path / "passed.txt"
    passed.write_text("0\n0\n1\n" + "1\n" * 7, encoding="utf-8")
    out = tmp_path / "rep.csv"
    assert run(capsys, "analyze", "--repetition", f, "--passed", passed, "--out", out)[0] == 0
    summary = {r[0]: r[1] for r in rows(out.read_text()) if r[0].startswith("summary")}
    assert summary["summary_ratio"] == "30.0"
    assert float(summary["summary_repetitive_accuracy"]) == pytest.approx(100 / 3)
    assert float(summary["summary_non_repetitive_accuracy"]) == 100.0
    code, text, _ = run(capsys, "analyze", "--repetition", f, "--min-repeats", 4)
    assert dict(r for r in rows(text) if r[0] == "summary_ratio")["summary_ratio"] == "0.0"


def test_usage_errors_exit_one():
    for argv in ([], ["frobnicate"], ["analyze"], ["bench", "--n", "x"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 1
