# Beam search with a CTRL-style repetition penalty.
#
# The toy next-token table below ignores history: token 1 always scores
# highest, so plain decoding loops on it. Dividing positive logits (and
# multiplying negative ones) of already generated tokens breaks the loop.

import numpy as np

from gspeech.llm import GenerationConfig, apply_repetition_penalty, beam_search, greedy_decode

END = 0


def table(generated):
    return np.array([0.5, 1.2, 1.0])  # end, "a", "b"


print("penalty rule:", apply_repetition_penalty(np.array([2.0, -1.0, 0.5]), [0, 1], 3.0))
print("no penalty :", greedy_decode(table, 6, eos_id=END))
print("penalty 3.0:", greedy_decode(table, 6, eos_id=END, repetition_penalty=3.0))

for beam in (1, 2, 4):
    best = beam_search(table, GenerationConfig(beam_size=beam, max_new_tokens=6), eos_id=END)
    print(f"beam {beam}: {best.tokens}  score {best.score:.3f}")
