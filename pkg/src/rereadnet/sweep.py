"""Re-read step sensitivity on a synthetic key-counting task.

Sentence a hides 0 to 5 distinct key words among filler words; the label is
the bucket of that count (0-1, 2-3, 4-5). Sentence b is filler only, so the
evidence is spread over several positions of a and more re-read steps can in
principle gather more of it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import Featurizer, PairExample, batch_pad
from .embedding import build_vocab
from .heads import NLI_LABELS
from .models import ModelConfig, build_model
from .training import TrainConfig, evaluate, train_loop

N_KEYS = 8
N_FILL = 40


def key_count_pairs(n: int, seed: int = 0) -> list[PairExample]:
    rng = np.random.default_rng(seed)
    keys = [f"k{i}" for i in range(N_KEYS)]
    fill = [f"f{i}" for i in range(N_FILL)]
    out = []
    for i in range(n):
        k = int(rng.integers(0, 6))
        a = list(rng.choice(fill, int(rng.integers(8, 14)), replace=False))
        for w in rng.choice(keys, k, replace=False):
            a.insert(int(rng.integers(0, len(a) + 1)), str(w))
        b = [str(w) for w in rng.choice(fill, int(rng.integers(3, 6)), replace=False)]
        label = NLI_LABELS[0] if k >= 4 else NLI_LABELS[2] if k >= 2 else NLI_LABELS[1]
        out.append(PairExample([str(w) for w in a], b, label, pair_id=f"syn-{i}"))
    return out


@dataclass
class SweepRow:
    steps: int
    best_seed: int
    test_accuracy: float
    seed_accuracies: list[float]
    seconds: float


def sweep_config(steps: int) -> ModelConfig:
    return ModelConfig(model="drrnet", word_dim=16, char_dim=8, char_emb_dim=4, d_g=16, d_a=12,
                       l_s=1, mlp_hidden=32, t1=steps)


def t_sweep(steps=range(1, 9), n_pairs: int = 500, seeds: int = 3, epochs: int = 30,
            lr: float = 0.002, data_seed: int = 0) -> list[SweepRow]:
    """Test accuracy per re-read step count, best of ``seeds`` runs by validation loss.

    The pairs split 70/10/20 into train, validation and test.
    """
    data = key_count_pairs(n_pairs, data_seed)
    n_train, n_val = int(0.7 * n_pairs), int(0.1 * n_pairs)
    train, val, test = data[:n_train], data[n_train:n_train + n_val], data[n_train + n_val:]
    sentences = [s for ex in train for s in (ex.tokens_a, ex.tokens_b)]
    chars = Featurizer.char_vocab_from(train)
    rows = []
    for t in steps:
        start = time.perf_counter()
        runs = []
        for seed in range(seeds):
            vocab, table = build_vocab(sentences, None, np.random.default_rng([seed, 1]), 16)
            feat = Featurizer(vocab, chars)
            model = build_model(sweep_config(t), table, len(chars), seed)
            cfg = TrainConfig(batch_size=32, max_epochs=epochs, val_every=11, lr_init=lr,
                              seed=seed)
            res = train_loop(model, train, val, feat, NLI_LABELS, cfg)
            acc = evaluate(model, batch_pad(test, 50, feat, NLI_LABELS), NLI_LABELS)["accuracy"]
            runs.append((res.best_val_loss, seed, acc))
        _, best_seed, best_acc = min(runs)
        rows.append(SweepRow(t, best_seed, best_acc, [r[2] for r in runs],
                             time.perf_counter() - start))
    return rows


def has_late_peak(accuracies: list[float], min_peak_steps: int = 3) -> bool:
    """True when accuracy never drops before its first maximum and that maximum
    sits at ``min_peak_steps`` or later (entries are for steps 1, 2, ...)."""
    peak = int(np.argmax(accuracies))
    rising = all(a <= b for a, b in zip(accuracies[:peak], accuracies[1:peak + 1]))
    return rising and peak + 1 >= min_peak_steps


def format_table(rows: list[SweepRow]) -> str:
    lines = ["T  test_acc  best_seed  per_seed"]
    for r in rows:
        per = " ".join(f"{a:.2f}" for a in r.seed_accuracies)
        lines.append(f"{r.steps}  {r.test_accuracy:.3f}     {r.best_seed}          {per}")
    return "\n".join(lines)
