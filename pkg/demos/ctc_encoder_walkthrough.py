# Training a toy conformer CTC encoder on synthetic tone "speech".
#
# Each character is rendered as a 100 ms sine tone, so a transcript is a
# melody. The encoder sees 50 Hz stacked log-mel frames and learns to emit
# the characters through a CTC head (blank = 0).

import numpy as np

import gspeech.numerics as nx
from gspeech.audio import encoder_features
from gspeech.ctc import Alphabet, ctc_greedy_decode, ctc_loss
from gspeech.data import synth_dataset
from gspeech.encoder import EncoderConfig, EncoderTrainConfig, conformer_forward, train_encoder

# A two-frame sanity check first: the loss sums the three paths "a a", "- a", "a -".

p = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
by_hand = -np.log(p[0, 1] * p[1, 1] + p[0, 0] * p[1, 1] + p[0, 1] * p[1, 0])
print("ctc loss", ctc_loss(nx.Tensor(np.log(p)), [1]).loss.item(), "by hand", by_hand)

# Sixteen utterances over ten characters.

waves, records = synth_dataset(seed=0, n=16)
alpha = Alphabet.from_chars("abcdefghij")
print(records[0].text, encoder_features(waves[records[0].id]).frames.shape)

cfg = EncoderConfig.toy(output_dim=len(alpha))
result = train_encoder(cfg, waves, records, alpha, EncoderTrainConfig(steps=200, batch_size=8))
losses = [row["loss_final"] for row in result.log_rows]
print("loss: first %.3f  last %.3f" % (losses[0], losses[-1]))

# Greedy decoding of the final layer.

params = nx.params_from_store(result.params, trainable=lambda name: False)
correct = 0
for r in records:
    logits = conformer_forward(cfg, params, encoder_features(waves[r.id])).final_logits
    hyp = ctc_greedy_decode(nx.log_softmax(logits, -1), alpha)
    correct += hyp == r.text
    print(f"{r.text:>10}  ->  {hyp}")
print(f"{correct}/{len(records)} exact")
