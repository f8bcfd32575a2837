# Balancing corpora of very different sizes.
#
# Corpus i is drawn with probability proportional to n_i ** alpha. alpha = 1
# keeps the natural proportions, alpha = 0 is uniform, and values in
# between flatten the distribution toward small corpora.

import numpy as np

from gspeech.data import BalancedSampler, ManifestRecord, balanced_probs

names = ["big", "medium", "small"]
sizes = [90000, 9000, 1000]
for a in (1.0, 0.6, 0.3, 0.0):
    print(f"alpha {a:3.1f}:", np.round(balanced_probs(sizes, a), 4))

# The sampler draws a corpus, then a record uniformly inside it.

records = [ManifestRecord(id=f"{c}-{i}", audio="-", text="x", duration_s=1.0, corpus=c)
           for c, n in zip(names, (900, 90, 10)) for i in range(n)]
sampler = BalancedSampler(records, alpha=0.6)
drawn = sampler.draw(np.random.default_rng(0), 20000)
for c, p in zip(sampler.plan.corpora, sampler.plan.probs):
    seen = sum(r.corpus == c for r in drawn) / len(drawn)
    print(f"{c:>6}: target {p:.4f}  observed {seen:.4f}")
