"""End-to-end acceptance criteria, one PASS/FAIL line each (see the terminal summary)."""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from rereadnet import tensor as T
from rereadnet.cli import RunConfig, restore, run_eval, run_trace, run_train, resolve_path
from rereadnet.data import Featurizer, PairExample, make_batch, parse_dataset, save_checkpoint
from rereadnet.embedding import build_vocab, load_antonyms
from rereadnet.heads import NLI_LABELS
from rereadnet.ladra import LocalEncoding, SequentialAttention, dsa_read
from rereadnet.models import ModelConfig, build_model
from rereadnet.sweep import format_table, has_late_peak, t_sweep
from rereadnet.tensor import Tensor
from rereadnet.training import TrainConfig, batch_loss, train_loop

TOY = "@toy"


def test_gradient_oracle(verdict):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "rereadnet", "gradcheck"], capture_output=True,
                          text=True)
    seconds = time.perf_counter() - start
    rep = json.loads(proc.stdout)
    worst_op = max(rep["ops"], key=rep["ops"].get)
    ok = proc.returncode == 0 and rep["passed"] and seconds < 120
    assert verdict("gradient oracle", ok,
                   f"{rep['n_ops']} checks, worst {rep['worst']:.2e} ({worst_op}) < 1e-4, "
                   f"{seconds:.0f}s < 120s")


def test_sharp_selection(verdict):
    rng = np.random.default_rng(0)
    min_winner, mismatches = 1.0, 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        logits = rng.normal(size=n)
        top = int(rng.integers(n))
        others = np.delete(logits, top)
        logits[top] = others.max() + rng.uniform(0.2, 1.0)
        w = T.softmax_sharp(Tensor(logits), 100.0).data
        min_winner = min(min_winner, float(w[top]))
        mismatches += int(np.argmax(w) != np.argmax(logits))
    ok = min_winner >= 0.999 and mismatches == 0
    assert verdict("sharp selection", ok,
                   f"1000 trials, min winner weight {min_winner:.9f} >= 0.999, "
                   f"{mismatches} argmax mismatches")


def _repeats(state) -> int:
    idx = [int(np.argmax(step[0][0])) for step in state.weights]
    return len(idx) - len(set(idx))


def test_coverage(verdict):
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(1000):
        n, d, n_grans, steps = int(rng.integers(1, 13)), 4, int(rng.integers(1, 4)), int(rng.integers(1, 9))
        mask = np.ones((2, n), bool)
        mask[1, int(rng.integers(1, n + 1)):] = False
        grans = [Tensor(rng.normal(size=(2, n, d)) * 2) for _ in range(n_grans)]
        hab = Tensor(rng.normal(size=(2, d)))
        _, state = dsa_read(LocalEncoding(grans, mask, [hab], hab),
                            SequentialAttention(d, 3, 3, n_grans, rng), steps)
        prev = [np.ones((2, n))] * n_grans
        for step in state.coverage:
            for p, c in zip(prev, step):
                bad += int(((c < 0) | (c > 1) | (c > p)).any())
            prev = step

    # paired runs: 10 nearly identical tokens give near-uniform logits
    fewer = positive = positive_fewer = 0
    for trial in range(1000):
        r = np.random.default_rng([1, trial])
        base = r.normal(size=8)
        grans = [Tensor((base + 0.01 * r.normal(size=(10, 8)))[None]) for _ in range(3)]
        hab = Tensor(r.normal(size=(1, 8)))
        local = LocalEncoding(grans, np.ones((1, 10), bool), [hab], hab)
        dsa = SequentialAttention(8, 6, 6, 3, r)
        _, on = dsa_read(local, dsa, 5, 100.0, use_coverage=True)
        _, off = dsa_read(local, dsa, 5, 100.0, use_coverage=False)
        won = _repeats(on) < _repeats(off)
        fewer += won
        u = dsa.units[0]
        cond = dsa.initial_state(hab).data @ u.u_rd.data.T + hab.data @ u.m_rd.data.T
        first = np.tanh(grans[0].data @ u.w_rd.data.T + cond[:, None]) @ u.omega_rd.data
        if first.mean() > 0:
            positive += 1
            positive_fewer += won
    frac = fewer / 1000
    ok = bad == 0 and frac >= 0.9
    assert verdict("coverage", ok,
                   f"{bad} monotonicity/bound violations in 1000 runs; fewer repeats with "
                   f"coverage in {frac:.1%} of 1000 paired runs (need >= 90%; "
                   f"{positive_fewer / positive:.1%} when first-step scores are positive, "
                   f"{(fewer - positive_fewer) / (1000 - positive):.1%} when negative)")


@pytest.fixture(scope="module", params=["drrnet", "ladranet"])
def overfit(request, tmp_path_factory):
    out = tmp_path_factory.mktemp(f"overfit-{request.param}")
    cfg = RunConfig.from_flat({**RunConfig().to_flat(), "model": request.param, "train": TOY,
                               "val": TOY, "antonyms": "@toy-antonyms", "out_dir": str(out),
                               "target_train_acc": 1.0})
    start = time.perf_counter()
    summary = run_train(cfg)
    seconds = time.perf_counter() - start
    return request.param, out, summary, seconds


def test_overfit(overfit, verdict):
    kind, out, summary, seconds = overfit
    rep = run_eval(summary["checkpoint"], TOY)
    epochs = summary["runs"][0]["epochs"]
    ok = rep["accuracy"] == 1.0 and epochs <= 200 and seconds < 300
    assert verdict(f"overfit {kind}", ok,
                   f"train accuracy {rep['accuracy']:.3f} after {epochs} epochs, {seconds:.0f}s")


def test_smoothed_loss_falls(overfit):
    # training-module invariant: 10-step window means never rise on the overfit task
    _, out, summary, _ = overfit
    recs = [json.loads(x) for x in (out / "metrics_seed0.jsonl").read_text().splitlines()]
    loss = np.array([r["train_loss"] for r in recs if "train_loss" in r])
    windows = loss[: len(loss) // 10 * 10].reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(windows) <= 0), np.round(windows, 4).tolist()


def test_shape_laws(verdict, rng):
    pairs = parse_dataset(resolve_path(TOY))[:2]
    sentences = [s for ex in pairs for s in (ex.tokens_a, ex.tokens_b)]
    vocab, table = build_vocab(sentences, None, rng)
    feat = Featurizer(vocab, Featurizer.char_vocab_from(pairs))
    batch = make_batch(pairs, feat, NLI_LABELS)
    drr = build_model(ModelConfig(model="drrnet"), table, len(feat.char_vocab), 0)(batch).extras
    lad_model = build_model(ModelConfig(model="ladranet"), table, len(feat.char_vocab), 0)
    lad = lad_model(batch).extras
    d = drr["stack_a"].states.shape[-1]
    n_packed = lad["encoding"].mask.shape[1]
    checks = {"stack width 1180": d == 412 + 3 * 256 == 1180,
              "match 4d": drr["match_h"].shape[-1] == 4 * d,
              "pcnn length": all(g.shape[1] == n_packed for g in lad["local"].granularities),
              "pcnn channels": all(g.shape[2] == lad_model.d_enc for g in lad["local"].granularities),
              "ladra average over 6": lad["n_averaged"] == 6}
    ok = all(checks.values())
    assert verdict("shape laws", ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}"
                                              for k, v in checks.items()))


def test_masking_invariance(verdict, rng):
    pairs = parse_dataset(resolve_path(TOY))[:6]
    sentences = [s for ex in pairs for s in (ex.tokens_a, ex.tokens_b)]
    vocab, table = build_vocab(sentences, None, rng)
    feat = Featurizer(vocab, Featurizer.char_vocab_from(pairs),
                      load_antonyms(resolve_path("@toy-antonyms")))
    worst = 0.0
    for kind in ("drrnet", "ladranet"):
        model = build_model(ModelConfig(model=kind), table, len(feat.char_vocab), 1)
        base = model(make_batch(pairs, feat, NLI_LABELS))
        la = base.extras["stack_a"].mask.shape[1] if kind == "drrnet" else max(len(p.tokens_a) for p in pairs)
        lb = max(len(p.tokens_b) for p in pairs)
        with T.no_grad():
            for extra in range(1, 9):
                for pad_a, pad_b in ((la + extra, None), (None, lb + extra)):
                    out = model(make_batch(pairs, feat, NLI_LABELS, pad_a=pad_a, pad_b=pad_b))
                    worst = max(worst, float(np.abs(out.probs.data - base.probs.data).max()))
    assert verdict("masking invariance", worst < 1e-10,
                   f"max |dp| {worst:.1e} < 1e-10 over 1..8 pads on either sentence, both models")


def test_determinism_and_persistence(verdict, tmp_path):
    logs = []
    for i in range(2):
        cfg = RunConfig.from_flat({**RunConfig().to_flat(), "train": TOY, "val": TOY,
                                   "out_dir": str(tmp_path / f"run{i}"), "max_epochs": 2,
                                   "val_every": 2, "seed": 3})
        run_train(cfg)
        logs.append((tmp_path / f"run{i}" / "metrics_seed3.jsonl").read_bytes())
    same_logs = logs[0] == logs[1]

    r = restore(str(tmp_path / "run0" / "model.ckpt"))
    pairs = parse_dataset(resolve_path(TOY))[:8]
    golden = make_batch(pairs, r.featurizer, r.labels)
    probs = r.model(golden).probs.data
    save_checkpoint(tmp_path / "again.ckpt", r.model.state_dict(), r.config.to_flat(), 3,
                    {"vocab": r.featurizer.vocab.itos, "chars": r.featurizer.char_vocab.itos,
                     "labels": list(r.labels)})
    again = restore(str(tmp_path / "again.ckpt"))
    same_probs = again.model(golden).probs.data.tobytes() == probs.tobytes()
    assert verdict("determinism & persistence", same_logs and same_probs,
                   f"loss logs bit-identical: {same_logs}; checkpoint round-trip outputs "
                   f"bit-identical: {same_probs}")


def test_trace(overfit, verdict):
    kind, _, summary, _ = overfit
    if kind != "drrnet":
        pytest.skip("the re-read trace criterion concerns DRr-Net")
    pairs = parse_dataset(resolve_path(TOY))
    counts_ok = tokens_ok = True
    with_repeat = []
    for ex in pairs:
        recs = run_trace(summary["checkpoint"], " ".join(ex.tokens_a), " ".join(ex.tokens_b))
        for name, sent in (("a", ex.tokens_a), ("b", ex.tokens_b)):
            steps = [r for r in recs if r.get("sentence") == name]
            counts_ok &= len(steps) == 6
            tokens_ok &= all(r["token"] == sent[r["index"]] for r in steps)
            idx = [r["index"] for r in steps]
            if len(set(idx)) < len(idx):
                with_repeat.append(" ".join(r["token"] for r in steps))
    ok = counts_ok and tokens_ok and bool(with_repeat)
    example = with_repeat[0] if with_repeat else "none"
    assert verdict("trace reproduction", ok,
                   f"6 selections per sentence: {counts_ok}; tokens from input: {tokens_ok}; "
                   f"{len(with_repeat)} of {2 * len(pairs)} sentence traces repeat "
                   f"(e.g. '{example}')")


def test_step_sensitivity(verdict):
    rows = t_sweep()
    table = format_table(rows)
    print(table)
    acc = [r.test_accuracy for r in rows]
    peak = int(np.argmax(acc)) + 1
    ok = has_late_peak(acc)
    assert verdict("step sensitivity sweep", ok,
                   f"peak at T={peak} (need non-decreasing to a peak at T >= 3); accuracies "
                   + " ".join(f"T{r.steps}={r.test_accuracy:.2f}" for r in rows))
