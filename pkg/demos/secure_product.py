"""
Secure matrix product between two parties
=========================================

The rating holder owns a dense matrix P and the social holder owns a sparse
matrix Q.  Both are fixed-point encoded into the ring of integers modulo
2**64, and the product P @ Q is computed without either side revealing its
input.  The result is compared with the plaintext product, and then with the
triple-based baseline that needs a trusted dealer.
"""

import time

import numpy as np
import scipy.sparse as sp

from sesorec import (FixedPointConfig, MaskPolicy, MaskSource, TrustedInitializer, decode_fixed,
                     encode_fixed, ssmm_execute, tismm_execute, truncate)
from sesorec.ring import ring_add

rng = np.random.default_rng(7)
cfg = FixedPointConfig()

# A latent-factor block and a sparse friendship block
P = rng.normal(0, 1, (10, 300))
Q = sp.random(300, 64, density=0.02, random_state=3, format="csr")

eP = encode_fixed(P, cfg)
eQ = encode_fixed(Q.toarray(), cfg)

# Dense masks: Q is treated as a full matrix
t0 = time.perf_counter()
out = ssmm_execute(eP, eQ, source_a=MaskSource(1), source_b=MaskSource(2))
t_dense = time.perf_counter() - t0
secure = decode_fixed(truncate(out, cfg), cfg)
print("dense masks   max |error| =", np.abs(secure - P @ Q.toarray()).max(), f"({t_dense:.3f}s)")

# Sparse masks only touch the non-zeros of Q plus a few decoys per row
eQs = sp.csr_matrix(eQ)
t0 = time.perf_counter()
out = ssmm_execute(eP, eQs, policy=MaskPolicy.sparse(), source_a=MaskSource(1), source_b=MaskSource(2))
t_sparse = time.perf_counter() - t0
secure = decode_fixed(truncate(out, cfg), cfg)
print("sparse masks  max |error| =", np.abs(secure - P @ Q.toarray()).max(), f"({t_sparse:.3f}s)")

# The baseline: a dealer hands out Beaver triples, the parties end with shares
dealer = TrustedInitializer(seed=5)
M, N = tismm_execute(eP, eQ, dealer)
baseline = decode_fixed(truncate(ring_add(M, N), cfg), cfg)
print("triple-based  max |error| =", np.abs(baseline - P @ Q.toarray()).max())

# Each share on its own is uniform noise
print("first share, first row:", decode_fixed(M[0, :4], cfg))
