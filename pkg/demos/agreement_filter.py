# Keeping translation pairs on which two systems agree.
#
# Each pair has a primary and a secondary system output for the same source.
# Their disagreement (WER, BLEU or embedding cosine distance) is a cheap
# proxy for quality: low-disagreement pairs tend to be the good ones.

import numpy as np

from gspeech.ast_filter import (FilterSpec, TranslationPair, curve_value_at, filter_pairs,
                                length_bias_report, selection_curve)

rng = np.random.default_rng(0)
vocab = [f"w{i}" for i in range(200)]
pairs = []
for i in range(400):
    src = [vocab[j] for j in rng.integers(0, 200, size=int(rng.integers(6, 25)))]
    frac = rng.uniform()
    other = [w if rng.uniform() > frac else "x" + w for w in src]
    # the hidden quality drops as the systems disagree
    pairs.append(TranslationPair(f"p{i}", " ".join(src), " ".join(src), " ".join(other),
                                 quality=float(80 - 60 * frac + rng.normal(0, 5))))

for spec in (FilterSpec("wer", 0.3), FilterSpec("bleu", 50.0)):
    kept, stats = filter_pairs(pairs, spec)
    print(f"{spec.metric}: kept {stats.kept}/{stats.total}")
    curve = selection_curve(pairs, spec)
    print("  mean quality, best 20%%: %.1f   all: %.1f"
          % (curve_value_at(curve, 0.2), curve_value_at(curve, 1.0)))
    print("  length ratio kept/all:", round(length_bias_report(pairs, spec).ratio, 3))
