import csv
import numpy as np
import pytest
import toplab.trainer
from toplab import tensor as tt
from toplab.cli import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    config_from_values,
    format_config,
    main,
    parse_config_file,
)
from toplab.losses import ntp_loss
from toplab.synthtext import generate_text
from toplab.top_targets import densify, oracle_forward_scan, read_sparse_file
@pytest.fixture()
def corpus_file(tmp_path):
    p = tmp_path / "corpus.txt"
    p.write_bytes(generate_text(30_000, seed=5))
    return p
@pytest.fixture()
def tiny_cfg_file(tmp_path, corpus_file):
    p = tmp_path / "tiny.cfg"
    p.write_text(
        "objective = ntp\n"
        "model.hidden_size = 16\n"
        "model.layers = 1\n"
        "model.n_heads = 2\n"
        "model.vocab_size = 256\n"
        "model.max_seq_len = 32\n"
        "steps = 10\n"
        "warmup_steps = 2\n"
        "peak_lr = 0.001\n"
        "batch_size = 2\n"
        "eval_every = 5\n"
        "checkpoint_every = 5\n"
        "holdout_fraction = 0.1\n"
        "eval.max_batches = 2\n"
        f"corpus = {corpus_file}\n"
    )
    return p
def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))
def test_train_writes_metrics_rows(tiny_cfg_file, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_cfg_file), "--out", str(out)]) == EXIT_OK
    assert len(read_rows(out / "metrics.csv")) == 10
    assert (out / "manifest.txt").exists()
    assert (out / "final.ckpt").exists()
def test_steps_flag_overrides_config(tiny_cfg_file, tmp_path):
    out = tmp_path / "run5"
    assert main(["train", "--config", str(tiny_cfg_file), "--steps", "5",
                 "--out", str(out)]) == EXIT_OK
    assert len(read_rows(out / "metrics.csv")) == 5
def test_missing_corpus_no_partial_outputs(tiny_cfg_file, tmp_path):
    out = tmp_path / "never"
    code = main(["train", "--config", str(tiny_cfg_file), "--corpus",
                 str(tmp_path / "nope.bin"), "--out", str(out)])
    assert code == EXIT_RUNTIME
    assert not out.exists()
def test_unknown_config_key_fails_before_training(tmp_path, corpus_file):
    bad = tmp_path / "bad.cfg"
    bad.write_text(f"corpus = {corpus_file}\nsteps = 5\nnot_a_key = 1\n")
    out = tmp_path / "x"
    assert main(["train", "--config", str(bad), "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()
def test_manifest_reruns_bitwise(tiny_cfg_file, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["train", "--config", str(tiny_cfg_file), "--out", str(a)]) == EXIT_OK
    assert main(["train", "--config", str(a / "manifest.txt"), "--out", str(b)]) == EXIT_OK
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "eval.csv").read_bytes() == (b / "eval.csv").read_bytes()
def test_config_round_trip_through_format():
    values = {"objective": "top", "objective.window": "8", "steps": "42",
              "model.hidden_size": "16", "model.layers": "1", "model.n_heads": "2",
              "model.max_seq_len": "32", "corpus": "/tmp/c", "seed": "9"}
    cfg = config_from_values(values)
    again = config_from_values({k: v for k, v in format_config(cfg)})
    assert again == cfg
def test_packaged_configs_parse():
    for name in ("desk_ntp", "desk_mtp", "desk_top", "fullscale_340m"):
        from toplab.cli import find_config_file
        cfg = config_from_values(parse_config_file(find_config_file(name)))
        cfg.validate()
    assert config_from_values(parse_config_file(find_config_file("desk_top"))).model.objective.window == 32
def test_w1_top_loss_equals_instrumented_ntp_on_top_head(tmp_path, corpus_file, monkeypatch):
    """With a one-token window the ranking targets are one-hot at the next
    token, so the fused loss must match a plain cross-entropy computed
    independently on the token-order head."""
    args = ["--config", None, "--out", None]
    cfg = tmp_path / "topw1.cfg"
    cfg.write_text(
        "objective = top\nobjective.window = 1\n"
        "model.hidden_size = 16\nmodel.layers = 1\nmodel.n_heads = 2\n"
        "model.max_seq_len = 32\nsteps = 6\nwarmup_steps = 1\npeak_lr = 0.001\n"
        "batch_size = 2\neval_every = 6\ncheckpoint_every = 6\nholdout_fraction = 0.1\n"
        "dtype = f64\n"
        f"corpus = {corpus_file}\n")
    out_a = tmp_path / "fused"
    assert main(["train", "--config", str(cfg), "--out", str(out_a)]) == EXIT_OK
    def instrumented(hidden, weights, sparse, mask, block_size):
        T = hidden.shape[1]
        targets = np.full((len(sparse), T), 256, dtype=np.int64)
        for b, sp in enumerate(sparse):
            nonempty = np.flatnonzero(sp.counts() > 0)
            targets[b, nonempty] = sp.tokens[sp.offsets[nonempty]]
        return ntp_loss(tt.matmul(hidden, weights), targets, mask)
    monkeypatch.setattr(toplab.trainer, "top_loss_fused", instrumented)
    out_b = tmp_path / "instr"
    assert main(["train", "--config", str(cfg), "--out", str(out_b)]) == EXIT_OK
    ra, rb = read_rows(out_a / "metrics.csv"), read_rows(out_b / "metrics.csv")
    for a, b in zip(ra, rb):
        assert float(a["loss_top"]) == pytest.approx(float(b["loss_top"]), abs=1e-6)
        assert float(a["loss_total"]) == pytest.approx(float(b["loss_total"]), abs=1e-6)
def test_build_targets_matches_oracle_and_idempotent(tmp_path):
    corpus = tmp_path / "tiny.txt"
    corpus.write_bytes(bytes([0, 1, 2, 1, 0, 2, 2, 1, 0, 0, 1, 2]))
    out1 = tmp_path / "t1.topt"
    assert main(["build-targets", "--corpus", str(corpus), "-V", "3", "-W", "2",
                 "--out", str(out1)]) == EXIT_OK
    sp = read_sparse_file(out1)
    padded = np.array([0, 1, 2, 1, 0, 2, 2, 1, 0, 0, 1, 2, 3, 3])
    np.testing.assert_array_equal(densify(sp).scores, oracle_forward_scan(padded, 3, 2).scores)
    out2 = tmp_path / "t2.topt"
    assert main(["build-targets", "--corpus", str(corpus), "-V", "3", "-W", "2",
                 "--out", str(out2)]) == EXIT_OK
    assert out1.read_bytes() == out2.read_bytes()
def test_build_targets_rejects_w0(tmp_path):
    corpus = tmp_path / "c.bin"
    corpus.write_bytes(b"abc")
    assert main(["build-targets", "--corpus", str(corpus), "-W", "0",
                 "--out", str(tmp_path / "x.topt")]) == EXIT_USAGE
def test_generate_deterministic_and_strip(tiny_cfg_file, tmp_path, capsys):
    out = tmp_path / "gen"
    assert main(["train", "--config", str(tiny_cfg_file), "--steps", "5",
                 "--out", str(out)]) == EXIT_OK
    ckpt = str(out / "final.ckpt")
    capsys.readouterr()
    assert main(["generate", "--ckpt", ckpt, "--prompt", "the quiet", "--max-new", "8"]) == EXIT_OK
    first = capsys.readouterr().out
    assert main(["generate", "--ckpt", ckpt, "--prompt", "the quiet", "--max-new", "8"]) == EXIT_OK
    assert capsys.readouterr().out == first
    assert first.startswith("the quiet")
def test_eval_command_prints_report(tiny_cfg_file, tmp_path, corpus_file, capsys):
    out = tmp_path / "ev"
    assert main(["train", "--config", str(tiny_cfg_file), "--steps", "5",
                 "--out", str(out)]) == EXIT_OK
    assert main(["eval", "--ckpt", str(out / "final.ckpt"), "--corpus",
                 str(corpus_file)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "ntp head loss" in printed and "perplexity" in printed
def test_compare_three_runs_and_missing_file(tmp_path, corpus_file, capsys):
    base = ("objective = ntp\nmodel.hidden_size = 16\nmodel.layers = 1\n"
            "model.n_heads = 2\nmodel.max_seq_len = 32\nsteps = 4\nwarmup_steps = 1\n"
            "peak_lr = 0.001\nbatch_size = 2\neval_every = 4\ncheckpoint_every = 4\n"
            f"holdout_fraction = 0.1\ncorpus = {corpus_file}\n")
    dirs = []
    for name, extra in [("ntp", ""), ("top", "objective = top\nobjective.window = 4\n"),
                        ("mtp", "objective = mtp\nobjective.future_tokens = 2\n"
                                "model.layers = 2\n")]:
        cfgp = tmp_path / f"{name}.cfg"
        cfgp.write_text(base + extra)
        out = tmp_path / f"cmp_{name}"
        assert main(["train", "--config", str(cfgp), "--out", str(out)]) == EXIT_OK
        dirs.append(str(out))
    capsys.readouterr()
    assert main(["compare", *dirs]) == EXIT_OK
    table = capsys.readouterr().out
    rows = list(csv.reader(table.splitlines()))
    assert rows[0][0] == "metric" and len(rows[0]) == 4
    metric_names = [r[0] for r in rows]
    assert "heldout_ntp_loss" in metric_names
    assert "ntp_loss_delta_vs_ntp" in metric_names
    # single dir -> degenerate one-column table
    assert main(["compare", dirs[0]]) == EXIT_OK
    assert len(list(csv.reader(capsys.readouterr().out.splitlines()))[0]) == 2
    # missing file names the offender
    empty = tmp_path / "empty_run"
    empty.mkdir()
    assert main(["compare", str(empty)]) == EXIT_RUNTIME
def test_usage_error_exit_code():
    assert main(["train", "--objective", "nope"]) == EXIT_USAGE
    assert main(["definitely-not-a-command"]) == EXIT_USAGE
def test_nothing_written_outside_output_dir(tiny_cfg_file, tmp_path, monkeypatch):
    sandbox = tmp_path / "cwd"
    sandbox.mkdir()
    monkeypatch.chdir(sandbox)
    out = tmp_path / "only_here"
    assert main(["train", "--config", str(tiny_cfg_file), "--steps", "3",
                 "--out", str(out)]) == EXIT_OK
    assert list(sandbox.iterdir()) == []
