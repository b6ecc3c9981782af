import hashlib
import json

import numpy as np
import pytest

from alpi.checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from alpi.cli import main, read_config
from alpi.model import ModelConfig, PiConfig, TransformerLM, forward


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def corpus(tmp_path):
    rng = np.random.default_rng(0)
    words = "alpha beta gamma delta epsilon zeta eta theta iota kappa".split()
    path = tmp_path / "corpus.txt"
    path.write_bytes(" ".join(words[i] for i in rng.integers(10, size=3000)).encode())
    return path


@pytest.fixture
def ckpt(tmp_path):
    model = TransformerLM(ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, train_len=16, seed=5))
    rng = np.random.default_rng(1)
    for v in model.params.values():
        v += rng.normal(0, 0.2, size=v.shape)
    path = tmp_path / "m.alpi"
    save_checkpoint(ModelCheckpoint.from_model(model), path)
    return path


TINY = ["--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--d-ff", "32", "--context-len", "16"]


# -- train -------------------------------------------------------------------------

def test_train_zero_steps_equals_init(tmp_path, corpus):
    out = tmp_path / "ck.alpi"
    assert main(["train", "--corpus", str(corpus), "--steps", "0", "--out", str(out), *TINY]) == 0
    ck = load_checkpoint(out)
    init = TransformerLM(ck.config).params
    assert all(np.array_equal(ck.params[k], init[k]) for k in init)
    manifest = json.loads((tmp_path / "ck.alpi.manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["inputs"][str(corpus)] == sha(corpus)
    assert manifest["config"]["steps"] == 0 and manifest["seed"] == 0
    assert (tmp_path / "ck.alpi.loss.csv").read_text() == "step,loss,lr\n"


def test_train_deterministic_and_force(tmp_path, corpus):
    args = ["train", "--corpus", str(corpus), "--steps", "5", "--warmup", "1", "--batch-size", "2", *TINY]
    a, b = tmp_path / "a.alpi", tmp_path / "b.alpi"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert sha(a) == sha(b)
    assert main(args + ["--out", str(a)]) == 2  # refuses to overwrite
    assert main(args + ["--out", str(a), "--force"]) == 0


def test_train_config_file_and_flag_precedence(tmp_path, corpus):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# toy run\ncorpus = {corpus}\nsteps=3\nwarmup = 1\nd-model=16\nn_heads=2\n"
                   "n-layers=1\nd-ff=32\ncontext-len=16\nbatch-size=2\nseed=9\n")
    out = tmp_path / "c.alpi"
    assert main(["train", "--config", str(cfg), "--seed", "4", "--out", str(out)]) == 0
    ck = load_checkpoint(out)
    assert ck.metadata["step"] == 3 and ck.metadata["seed"] == 4 and ck.config.d_model == 16


def test_train_error_codes(tmp_path, corpus):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x.alpi")]) == 2
    bad.write_text("steps = many\n")
    assert main(["train", "--config", str(bad), "--corpus", str(corpus), "--out", str(tmp_path / "x.alpi")]) == 2
    assert main(["train", "--corpus", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "y.alpi")]) == 3
    small = tmp_path / "small.txt"
    small.write_bytes(b"abc")
    assert main(["train", "--corpus", str(small), "--out", str(tmp_path / "z.alpi"), *TINY]) == 3


def test_train_divergence_exit_code(tmp_path, corpus):
    model = TransformerLM(ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, train_len=16))
    model.params["wte"][:] = np.inf
    init = tmp_path / "inf.alpi"
    init.write_bytes(ModelCheckpoint.from_model(model).to_bytes())
    code = main(["train", "--corpus", str(corpus), "--init", str(init), "--steps", "2", "--warmup", "1",
                 "--context-len", "16", "--out", str(tmp_path / "d.alpi")])
    assert code == 4


def test_train_retrieval_task_from_init(tmp_path, ckpt):
    out = tmp_path / "ft.alpi"
    code = main(["train", "--task", "retrieval", "--init", str(ckpt), "--steps", "2", "--warmup", "1",
                 "--batch-size", "2", "--context-len", "16", "--out", str(out)])
    assert code == 2 and not out.exists()  # context 16 cannot hold a 27-byte case


def test_train_retrieval_task(tmp_path):
    out = tmp_path / "ft.alpi"
    code = main(["train", "--task", "retrieval", "--steps", "2", "--warmup", "1", "--batch-size", "2",
                 "--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--d-ff", "32",
                 "--context-len", "32", "--out", str(out)])
    assert code == 0 and load_checkpoint(out).metadata["step"] == 2


def test_read_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("a-b = 1 # comment\n\nc=x=y\n")
    assert read_config(p) == {"a_b": "1", "c": "x=y"}


# -- eval-ppl ----------------------------------------------------------------------

def test_eval_ppl_neutral_at_trained_length(tmp_path, ckpt, corpus, capsys):
    outs = {}
    for mode in ("fixed", "baseline"):
        out = tmp_path / f"{mode}.csv"
        assert main(["eval-ppl", "--checkpoint", str(ckpt), "--docs", str(corpus), "--max-len", "16",
                     "--mode", mode, "--out", str(out)]) == 0
        outs[mode] = out.read_text()
    assert outs["fixed"] == outs["baseline"]
    assert outs["fixed"].startswith("position,mean_nll,mean_ppl\n")
    printed = capsys.readouterr().out.splitlines()
    assert len(printed) == 2 and printed[0] == printed[1]  # no extrapolation range at max-len 16


def test_eval_ppl_docs_directory(tmp_path, ckpt):
    d = tmp_path / "docs"
    d.mkdir()
    for i in range(3):
        (d / f"{i}.txt").write_bytes(bytes(range(40 + i, 80 + i)))
    out = tmp_path / "r.csv"
    assert main(["eval-ppl", "--checkpoint", str(ckpt), "--docs", str(d), "--max-len", "32",
                 "--mode", "per-position", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 32
    (d / "short.txt").write_bytes(b"tiny")
    assert main(["eval-ppl", "--checkpoint", str(ckpt), "--docs", str(d), "--max-len", "32",
                 "--out", str(tmp_path / "s.csv")]) == 3


def test_eval_ppl_errors(tmp_path, corpus):
    missing = tmp_path / "nope.alpi"
    code = main(["eval-ppl", "--checkpoint", str(missing), "--docs", str(corpus), "--max-len", "16",
                 "--out", str(tmp_path / "o.csv")])
    assert code == 3
    code = main(["eval-ppl", "--checkpoint", str(missing), "--docs", str(corpus), "--max-len", "16",
                 "--mode", "rope", "--out", str(tmp_path / "o.csv")])
    assert code == 2


def test_missing_checkpoint_diagnostic(tmp_path, corpus, capsys):
    missing = tmp_path / "nope.alpi"
    main(["eval-ppl", "--checkpoint", str(missing), "--docs", str(corpus), "--max-len", "16",
          "--out", str(tmp_path / "o.csv")])
    assert str(missing) in capsys.readouterr().err


# -- retrieval ---------------------------------------------------------------------

def test_retrieval_zero_cases(tmp_path, ckpt):
    out = tmp_path / "r.csv"
    assert main(["retrieval", "--checkpoint", str(ckpt), "--cases", "0", "--out", str(out)]) == 0
    assert out.read_text() == "bucket_len,mode,n_cases,accuracy\n"


def test_retrieval_reproducible(tmp_path, ckpt):
    args = ["retrieval", "--checkpoint", str(ckpt), "--lengths", "30,40", "--cases", "5", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    assert [line.split(",")[:3] for line in text.splitlines()[1:]] == [["30", "fixed", "5"], ["40", "fixed", "5"]]


def test_retrieval_bad_length(tmp_path, ckpt):
    assert main(["retrieval", "--checkpoint", str(ckpt), "--lengths", "10", "--cases", "1",
                 "--out", str(tmp_path / "r.csv")]) == 2


# -- profile -----------------------------------------------------------------------

def _read_profile(path):
    rows = [line.split(",") for line in path.read_text().splitlines()]
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]])


def test_profile_scale_law(tmp_path):
    out = tmp_path / "p.csv"
    assert main(["profile", "--query-pos", "96", "--train-len", "64", "--out", str(out)]) == 0
    header, data = _read_profile(out)
    assert header == ["key_pos", "baseline", "pi"]
    assert data.shape == (96, 3)
    np.testing.assert_allclose(data[:, 2], data[:, 1] * 2 / 3, rtol=0, atol=1e-12)


def test_profile_gate_boundary(tmp_path):
    out = tmp_path / "p.csv"
    assert main(["profile", "--query-pos", "64", "--train-len", "64", "--out", str(out)]) == 0
    _, data = _read_profile(out)
    assert np.array_equal(data[:, 1], data[:, 2])


def test_profile_long_context_scale(tmp_path):
    out = tmp_path / "p.csv"
    assert main(["profile", "--query-pos", "10500", "--train-len", "8192", "--heads", "32",
                 "--head-index", "32", "--out", str(out)]) == 0
    _, data = _read_profile(out)
    m = 2.0**-8
    assert data[0, 1] == pytest.approx(-m * 10499)
    assert data[0, 2] == pytest.approx(-m * 10499 * 8192 / 10500)
    assert abs(data[0, 2]) < m * 8192 < abs(data[0, 1])


def test_profile_with_model_scores(tmp_path, ckpt):
    text = tmp_path / "t.txt"
    text.write_bytes(b"the quick brown fox jumps over the lazy dog")
    out = tmp_path / "p.csv"
    assert main(["profile", "--query-pos", "24", "--train-len", "16", "--heads", "2", "--head-index", "2",
                 "--checkpoint", str(ckpt), "--prompt-file", str(text), "--out", str(out)]) == 0
    header, data = _read_profile(out)
    assert header == ["key_pos", "baseline", "pi", "score_baseline", "score_pi"]
    np.testing.assert_allclose(data[:, 3] - data[:, 1], data[:, 4] - data[:, 2], atol=1e-12)


def test_profile_bad_head(tmp_path):
    assert main(["profile", "--query-pos", "8", "--train-len", "4", "--heads", "2", "--head-index", "3",
                 "--out", str(tmp_path / "p.csv")]) == 2


# -- generate ----------------------------------------------------------------------

def test_generate_zero_tokens(tmp_path, ckpt, capsysbinary):
    prompt = tmp_path / "p.txt"
    prompt.write_bytes(b"hello")
    assert main(["generate", "--checkpoint", str(ckpt), "--prompt-file", str(prompt), "--max-new", "0"]) == 0
    assert capsysbinary.readouterr().out == b""


def test_generate_fixed_needs_target(tmp_path, ckpt):
    prompt = tmp_path / "p.txt"
    prompt.write_bytes(b"hello")
    assert main(["generate", "--checkpoint", str(ckpt), "--prompt-file", str(prompt), "--mode", "fixed"]) == 2
    assert main(["generate", "--checkpoint", str(ckpt), "--prompt-file", str(prompt), "--mode", "fixed",
                 "--max-new", "8", "--target-len", "12"]) == 2


@pytest.mark.parametrize("mode, extra", [("per-position", []), ("fixed", ["--target-len", "40"])])
def test_generate_matches_full_forward_greedy(tmp_path, ckpt, capsysbinary, mode, extra):
    prompt = tmp_path / "p.txt"
    prompt.write_bytes(b"abcdefgh")
    assert main(["generate", "--checkpoint", str(ckpt), "--prompt-file", str(prompt),
                 "--max-new", "32", "--mode", mode, *extra]) == 0
    got = capsysbinary.readouterr().out
    model = load_checkpoint(ckpt).to_model()
    pi = PiConfig(16, 40, mode)
    seq = list(b"abcdefgh")
    for _ in range(32):
        seq.append(int(np.argmax(forward(model, seq, pi)[-1])))
    assert got == bytes(seq[8:])


# -- make-corpus -------------------------------------------------------------------

def test_make_corpus(tmp_path):
    out = tmp_path / "ref.txt"
    assert main(["make-corpus", "--out", str(out)]) == 0
    assert out.stat().st_size >= 1 << 20
    assert main(["make-corpus", "--out", str(out)]) == 2
