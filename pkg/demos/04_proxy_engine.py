#!/usr/bin/env python3
"""The log-prob proxy engine: virtual steps instead of gradient dot products.

Rather than materializing full gradients to get c = <g_RL, g_MTP> and
v2 = ||g_MTP||^2, take a virtual step along each objective's gradient and
watch how the realized token log-probs move. The dot product and squared
norm of those per-token deltas track the exact quantities.
"""

import numpy as np

from occ_lab.policy import Backend, Head, ModelConfig, init_params
from occ_lab.proxy import (
    ClipMode,
    OccConfig,
    ProxyBackend,
    alignment_proxy,
    logprob_delta,
    occ_lambda,
    variance_proxy,
)
from occ_lab.rlgrad import collect_rollouts, plain_gradient
from occ_lab.tasks import sum_mod

cfg = ModelConfig(vocab_size=4, hidden_dim=16, backend=Backend.TINY_MLP)
pv = init_params(cfg, seed=3)
task = sum_mod(4, response_len=2)

rng = np.random.default_rng(0)
batch = None
while batch is None or batch.rewards.std() == 0:
    batch = collect_rollouts(pv, cfg, task, batch=32, group=8, temperature=1.0, rng=rng)
print(f"batch: {batch.size} responses, mean reward {batch.rewards.mean():.3f}")

g_rl = plain_gradient(pv, cfg, batch, Head.MAIN)
g_mtp = plain_gradient(pv, cfg, batch, Head.MTP)
c_exact = float(g_rl @ g_mtp)
v2_exact = float(g_mtp @ g_mtp)

eta = 1.0
for backend in ProxyBackend:
    d_rl = logprob_delta(pv, cfg, batch, g_rl, eta, backend)
    d_mtp = logprob_delta(pv, cfg, batch, g_mtp, eta, backend)
    c_hat = alignment_proxy(d_rl, d_mtp)
    v2_hat = variance_proxy(d_mtp)
    lam = occ_lambda(c_hat, v2_hat, OccConfig())
    print(f"\n{backend.value}:")
    print(f"  c_hat  = {c_hat:+.6f}   (exact c  = {c_exact:+.6f})")
    print(f"  v2_hat = {v2_hat:+.6f}   (exact v2 = {v2_exact:+.6f})")
    print(f"  adaptive coefficient lambda_t = {lam:+.4f}")

print("\nclip mode zeroes negative alignment instead of flipping the sign:")
for c_hat in (0.5, -0.5):
    keep = occ_lambda(c_hat, 0.25, OccConfig())
    clip = occ_lambda(c_hat, 0.25, OccConfig(clip_mode=ClipMode.CLIP))
    print(f"  c_hat={c_hat:+.1f}: signed -> {keep:+.2f}   clipped -> {clip:+.2f}")

print("\nvirtual-step vs linearized deltas converge at rate eta^2:")
g = rng.normal(0, 0.5, pv.values.size)
for step in (0.4, 0.2, 0.1, 0.05):
    dv = logprob_delta(pv, cfg, batch, g, step, ProxyBackend.VIRTUAL_STEP)
    df = logprob_delta(pv, cfg, batch, g, step, ProxyBackend.FIRST_ORDER)
    print(f"  eta={step:4.2f}: max |difference| = {np.abs(dv.values - df.values).max():.2e}")
