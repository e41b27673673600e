"""Command-line interface: exit codes, help goldens, artifacts, precedence."""

import functools
import json
import os

import numpy as np
import pytest

import flexifuse as ff
from flexifuse import cli, em, sampler, selftest

from conftest import TINY_ARCH

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "goldens")


def _run(argv, capsys):
    rc = cli.main(argv)
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


# ---------------------------------------------------------------- dispatch


def test_no_command_prints_usage_and_exits_1(capsys):
    rc, out, err = _run([], capsys)
    assert rc == 1
    assert "usage:" in out + err


@pytest.mark.parametrize(
    "name,argv",
    [
        ("main", ["--help"]),
        ("train", ["train", "--help"]),
        ("fuse", ["fuse", "--help"]),
        ("eval", ["eval", "--help"]),
        ("selftest", ["selftest", "--help"]),
    ],
)
def test_help_matches_golden(name, argv, capsys, monkeypatch):
    # argparse wraps to the terminal width; pin it to match the goldens
    monkeypatch.setenv("COLUMNS", "100")
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 0
    out = capsys.readouterr().out
    with open(os.path.join(GOLDEN_DIR, f"help_{name}.txt")) as fh:
        assert out == fh.read()


@pytest.mark.parametrize("cmd", ["train", "fuse"])
def test_help_enumerates_every_flag_with_default(cmd):
    with open(os.path.join(GOLDEN_DIR, f"help_{cmd}.txt")) as fh:
        text = fh.read()
    for key in cli.DEFAULTS[cmd]:
        assert "--" + key.replace("_", "-") in text
    assert text.count("(default:") >= len(cli.DEFAULTS[cmd])


# ------------------------------------------------------------ usage errors


def test_fuse_rejects_wrong_arity(capsys, source_pngs, tiny_ckpt, tmp_path):
    out = str(tmp_path / "f.png")
    for inputs in ([source_pngs[0]], source_pngs + source_pngs):
        rc, _, err = _run(
            ["fuse", *inputs, "--ckpt", tiny_ckpt, "-o", out], capsys
        )
        assert rc == 1
        assert err.startswith("usage error:")
        assert "2 or 3 inputs" in err


def test_fuse_rejects_mixed_dir_and_file(capsys, source_pngs, tiny_ckpt, tmp_path):
    d = tmp_path / "adir"
    d.mkdir()
    rc, _, err = _run(
        ["fuse", source_pngs[0], str(d), "--ckpt", tiny_ckpt, "-o", str(tmp_path / "o")],
        capsys,
    )
    assert rc == 1
    assert "all files or all directories" in err


def test_config_unknown_key_is_usage_error(capsys, source_pngs, tiny_ckpt, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus_knob=3\n")
    rc, _, err = _run(
        ["fuse", *source_pngs, "--ckpt", tiny_ckpt, "-o", str(tmp_path / "f.png"),
         "--config", str(cfg)],
        capsys,
    )
    assert rc == 1
    assert "bogus_knob" in err and "unknown" in err


def test_config_unreadable_file_is_usage_error(capsys, source_pngs, tiny_ckpt, tmp_path):
    rc, _, err = _run(
        ["fuse", *source_pngs, "--ckpt", tiny_ckpt, "-o", str(tmp_path / "f.png"),
         "--config", str(tmp_path / "absent.cfg")],
        capsys,
    )
    assert rc == 1
    assert err.startswith("usage error:")


# ---------------------------------------------------------------- selftest


def test_selftest_single_suite_passes(capsys):
    rc, out, _ = _run(["selftest", "--suite", "metrics"], capsys)
    assert rc == 0
    assert "PASS" in out and "metrics" in out
    assert "1/1 suites passed" in out


def test_selftest_prefix_selects_em_suites(capsys):
    rc, out, _ = _run(["selftest", "--suite", "em"], capsys)
    assert rc == 0
    ran = [line for line in out.splitlines() if line.startswith(("PASS", "FAIL"))]
    assert len(ran) == sum(1 for n in selftest.SUITES if n.startswith("em"))
    assert all("em-" in line for line in ran)


def test_selftest_unknown_suite_is_usage_error(capsys):
    rc, _, err = _run(["selftest", "--suite", "nonesuch"], capsys)
    assert rc == 1
    assert "no self-test suite matches" in err


def test_selftest_failure_exits_3(capsys, monkeypatch):
    monkeypatch.setitem(
        selftest.SUITES, "zz-injected", lambda seed=0: (False, "injected failure")
    )
    rc, out, _ = _run(["selftest", "--suite", "zz"], capsys)
    assert rc == 3
    assert "FAIL" in out and "injected failure" in out
    assert "0/1 suites passed" in out


def test_selftest_detects_corrupted_fft_cache(monkeypatch):
    # a poisoned operator cache must make the dense-solve suite fail loudly
    class _PoisonedOp(em.GradientOperator):
        def __init__(self, shape):
            super().__init__(shape)
            self.f_h = self.f_h + 5.0

    fn = selftest.SUITES["em-dense-solve"]
    monkeypatch.setitem(
        selftest.SUITES, "em-dense-solve", functools.partial(fn, op_factory=_PoisonedOp)
    )
    results = selftest.run_selftest("em-dense-solve")
    assert len(results) == 1
    name, ok, detail = results[0]
    assert name == "em-dense-solve"
    assert ok is False
    assert detail  # says why, instead of silently passing


# ------------------------------------------------------------------- train

_TRAIN_FLAGS = [
    "--synthetic", "12", "--size", "8", "--batch", "2", "--steps", "10",
    "--patch", "4", "--dim", "16", "--depth", "2", "--e-width", "32",
    "--state-dim", "8",
]


def test_train_writes_checkpoint_and_loss_artifacts(capsys, tmp_path):
    out = str(tmp_path / "run.ffz")
    rc, stdout, _ = _run(
        ["train", "-o", out, "--iters", "4", "--seed", "1", *_TRAIN_FLAGS], capsys
    )
    assert rc == 0
    assert f"checkpoint written to {out}" in stdout
    assert os.path.exists(out)
    stem = out[: -len(".ffz")]
    assert os.path.exists(stem + ".loss.csv")
    assert os.path.exists(stem + ".loss.png")
    with open(stem + ".loss.csv") as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 1 + 4
    _, pairs = ff.load_checkpoint(out)
    cfg = dict(pairs)
    assert cfg["steps"] == "10"
    assert cfg["dim"] == "16"


def test_train_zero_iters_checkpoint_equals_init(capsys, tmp_path):
    out = str(tmp_path / "init.ffz")
    rc, _, _ = _run(
        ["train", "-o", out, "--iters", "0", "--seed", "3", *_TRAIN_FLAGS], capsys
    )
    assert rc == 0
    params, _ = ff.load_checkpoint(out)
    fresh = ff.init_params(TINY_ARCH, seed=3)
    assert params.tensors.keys() == fresh.tensors.keys()
    for name in fresh.tensors:
        assert np.array_equal(params.tensors[name], fresh.tensors[name]), name


def test_train_same_seed_same_bytes(capsys, tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = str(tmp_path / f"{tag}.ffz")
        rc, _, _ = _run(
            ["train", "-o", out, "--iters", "3", "--seed", "5", *_TRAIN_FLAGS], capsys
        )
        assert rc == 0
        outs.append(out)
    with open(outs[0], "rb") as fa, open(outs[1], "rb") as fb:
        assert fa.read() == fb.read()


# -------------------------------------------------------------------- fuse


def test_fuse_smoke_and_determinism(capsys, source_pngs, tiny_ckpt, tmp_path):
    outs = []
    for tag in ("one", "two"):
        out = str(tmp_path / f"{tag}.png")
        rc, stdout, _ = _run(
            ["fuse", *source_pngs, "--ckpt", tiny_ckpt, "-o", out], capsys
        )
        assert rc == 0
        assert f"fused image written to {out}" in stdout
        outs.append(out)
    with open(outs[0], "rb") as fa, open(outs[1], "rb") as fb:
        assert fa.read() == fb.read()
    fused = ff.load_image(outs[0]).pixels
    assert fused.shape == (16, 16)


def test_fuse_three_inputs(capsys, source_pngs, tiny_ckpt, tmp_path):
    out = str(tmp_path / "tri.png")
    rc, _, _ = _run(
        ["fuse", *source_pngs, source_pngs[0], "--ckpt", tiny_ckpt, "-o", out],
        capsys,
    )
    assert rc == 0
    assert os.path.exists(out)


def test_fuse_trace_auto_path(capsys, source_pngs, tiny_ckpt, tmp_path):
    out = str(tmp_path / "traced.png")
    rc, _, _ = _run(
        ["fuse", *source_pngs, "--ckpt", tiny_ckpt, "-o", out, "--trace"], capsys
    )
    assert rc == 0
    trace_csv = out + ".trace.csv"
    assert os.path.exists(trace_csv)
    assert os.path.exists(out + ".trace.png")
    with open(trace_csv) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == sampler.TRACE_HEADER
    # checkpoint carries steps=10, so the trace covers t = 9 .. 0
    assert len(lines) == 1 + 10
    assert lines[1].split(",")[0] == "9"
    assert lines[-1].split(",")[0] == "0"


def test_fuse_trace_explicit_path(capsys, source_pngs, tiny_ckpt, tmp_path):
    out = str(tmp_path / "t.png")
    trace = str(tmp_path / "log" / "chain.csv")
    os.makedirs(os.path.dirname(trace))
    rc, _, _ = _run(
        ["fuse", *source_pngs, "--ckpt", tiny_ckpt, "-o", out, "--trace", trace],
        capsys,
    )
    assert rc == 0
    assert os.path.exists(trace)
    assert os.path.exists(str(tmp_path / "log" / "chain.png"))


def test_fuse_step_precedence_flag_config_checkpoint(
    capsys, source_pngs, tiny_ckpt, tmp_path
):
    """--steps beats the config file, which beats the checkpoint value."""

    def rows(argv_extra):
        out = str(tmp_path / "p.png")
        trace = str(tmp_path / "p.csv")
        rc, _, _ = _run(
            ["fuse", *source_pngs, "--ckpt", tiny_ckpt, "-o", out,
             "--trace", trace, *argv_extra],
            capsys,
        )
        assert rc == 0
        with open(trace) as fh:
            return len(fh.read().splitlines()) - 1

    cfg = tmp_path / "steps.cfg"
    cfg.write_text("steps=7\n")
    assert rows([]) == 10  # checkpoint-derived default
    assert rows(["--config", str(cfg)]) == 7
    assert rows(["--config", str(cfg), "--steps", "5"]) == 5


def test_fuse_carries_chroma_from_color_source(capsys, source_pngs, tiny_ckpt, tmp_path):
    rng = np.random.default_rng(11)
    rgb = ff.ImageBuffer(rng.random((16, 16, 3)).astype(np.float32))
    color_path = str(tmp_path / "color.png")
    ff.save_image(rgb, color_path)
    out = str(tmp_path / "fused_color.png")
    rc, _, _ = _run(
        ["fuse", source_pngs[0], color_path, "--ckpt", tiny_ckpt, "-o", out], capsys
    )
    assert rc == 0
    fused = ff.load_image(out).pixels
    assert fused.ndim == 3 and fused.shape[2] == 3


def test_fuse_directory_mode(capsys, tiny_ckpt, tmp_path):
    da, db = tmp_path / "a", tmp_path / "b"
    da.mkdir()
    db.mkdir()
    fields = ff.synthetic_corpus(4, size=16, seed=21)
    for i, name in enumerate(("x.png", "y.png")):
        ff.save_image(ff.denormalize(fields[i]), str(da / name))
        ff.save_image(ff.denormalize(fields[i + 2]), str(db / name))
    out = tmp_path / "fused"
    rc, stdout, _ = _run(
        ["fuse", str(da), str(db), "--ckpt", tiny_ckpt, "-o", str(out),
         "--steps", "5"],
        capsys,
    )
    assert rc == 0
    assert sorted(os.listdir(out)) == ["x.png", "y.png"]
    assert stdout.count("fused image written to") == 2

    # a worker pool must produce the same bytes as the serial path
    out2 = tmp_path / "fused2"
    rc, _, _ = _run(
        ["fuse", str(da), str(db), "--ckpt", tiny_ckpt, "-o", str(out2),
         "--steps", "5", "--jobs", "2"],
        capsys,
    )
    assert rc == 0
    for name in ("x.png", "y.png"):
        with open(out / name, "rb") as fa, open(out2 / name, "rb") as fb:
            assert fa.read() == fb.read()


def test_fuse_directory_mode_mismatched_listings(capsys, tiny_ckpt, tmp_path):
    da, db = tmp_path / "a", tmp_path / "b"
    da.mkdir()
    db.mkdir()
    fields = ff.synthetic_corpus(3, size=16, seed=22)
    ff.save_image(ff.denormalize(fields[0]), str(da / "x.png"))
    ff.save_image(ff.denormalize(fields[1]), str(db / "x.png"))
    ff.save_image(ff.denormalize(fields[2]), str(db / "extra.png"))
    rc, _, err = _run(
        ["fuse", str(da), str(db), "--ckpt", tiny_ckpt, "-o", str(tmp_path / "o")],
        capsys,
    )
    assert rc == 2
    assert err.startswith("error:")


def test_fuse_missing_checkpoint_exits_2(capsys, source_pngs, tmp_path):
    rc, _, err = _run(
        ["fuse", *source_pngs, "--ckpt", str(tmp_path / "no.ffz"),
         "-o", str(tmp_path / "f.png")],
        capsys,
    )
    assert rc == 2
    assert "checkpoint not found" in err


def test_fuse_corrupt_checkpoint_exits_2(capsys, source_pngs, tmp_path):
    bad = tmp_path / "bad.ffz"
    bad.write_bytes(b"garbage")
    rc, _, err = _run(
        ["fuse", *source_pngs, "--ckpt", str(bad), "-o", str(tmp_path / "f.png")],
        capsys,
    )
    assert rc == 2
    assert err.startswith("error:")


def test_fuse_missing_input_image_exits_2(capsys, source_pngs, tiny_ckpt, tmp_path):
    rc, _, err = _run(
        ["fuse", source_pngs[0], str(tmp_path / "absent.png"),
         "--ckpt", tiny_ckpt, "-o", str(tmp_path / "f.png")],
        capsys,
    )
    assert rc == 2
    assert err.startswith("error:")


# -------------------------------------------------------------------- eval


def test_eval_prints_table_and_writes_artifacts(capsys, source_pngs, tmp_path):
    out_csv = str(tmp_path / "scores.csv")
    out_json = str(tmp_path / "scores.json")
    rc, stdout, _ = _run(
        ["eval", "--fused", source_pngs[0], "--sources", *source_pngs,
         "-o", out_csv, "--json", out_json],
        capsys,
    )
    assert rc == 0
    for metric in ("EN", "SD", "PSNR", "SSIM", "MI", "CC", "SCD", "Q_NCIE"):
        assert metric in stdout
    assert os.path.exists(out_csv)
    assert os.path.exists(str(tmp_path / "scores.png"))
    with open(out_csv) as fh:
        header = fh.readline().strip()
    assert header == "image,EN,SD,PSNR,SSIM,MI,CC,SCD,Q_NCIE"
    data = json.loads(open(out_json).read())
    assert isinstance(data, list) and len(data) == 1
    assert data[0]["label"]


def test_eval_multiple_fused_rows(capsys, source_pngs, tmp_path):
    out_csv = str(tmp_path / "two.csv")
    rc, _, _ = _run(
        ["eval", "--fused", *source_pngs, "--sources", *source_pngs, "-o", out_csv],
        capsys,
    )
    assert rc == 0
    with open(out_csv) as fh:
        assert len(fh.read().splitlines()) == 3


def test_eval_wrong_source_count_is_usage_error(capsys, source_pngs):
    rc, _, err = _run(
        ["eval", "--fused", source_pngs[0], "--sources", source_pngs[0]], capsys
    )
    assert rc == 1
    assert "2 or 3" in err
