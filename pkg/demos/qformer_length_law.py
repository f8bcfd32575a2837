# How many vectors does each projector hand to the LLM?
#
# The windowed Q-former turns every window of K encoder frames into N query
# outputs. The MLP and cross-attention projectors pool with stride K/N, so
# all three run at the same rate; the Q-former only pads its last window.

import math

import numpy as np

from gspeech.adapter import QFormerConfig, init_adapter, project

cfg = QFormerConfig(enc_dim=8, llm_dim=12, model_dim=16, num_heads=2)
print("K =", cfg.window_frames, " N =", cfg.num_queries, " stride =", cfg.stride)

rng = np.random.default_rng(0)
table = rng.normal(size=(20, cfg.llm_dim))  # stand-in LLM embedding table for xattn
params = {kind: init_adapter(kind, cfg, 0) for kind in ("qformer", "mlp", "xattn")}

print(" T  qformer  mlp  xattn  N*ceil(T/K)")
for T in (1, 14, 15, 16, 30, 50, 150):
    X = rng.normal(size=(T, cfg.enc_dim))
    counts = [project(kind, params[kind], cfg, X, table).num_vectors for kind in params]
    print(f"{T:3d}  {counts[0]:7d}  {counts[1]:3d}  {counts[2]:5d}  "
          f"{cfg.num_queries * math.ceil(T / cfg.window_frames):11d}")

# 150 encoder frames at 50 Hz are 3 s of audio: 30 vectors, i.e. 10 Hz.
