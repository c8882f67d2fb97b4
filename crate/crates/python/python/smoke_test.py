"""Smoke test for the pygeocf extension module.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`,
then run `python crates/python/python/smoke_test.py`.
"""

import math
import os
import tempfile

import pygeocf as g

# optimal transport
cost = [[0.0, 1.0], [1.0, 0.0]]
assert abs(g.exact_wasserstein([0.5, 0.5], [1.0, 0.0], cost) - 0.5) < 1e-12
r = g.sinkhorn([0.5, 0.5], [0.5, 0.5], cost, epsilon=0.01, max_iter=5000)
assert r["converged"] and abs(r["transport_cost"]) < 1e-6
assert abs(sum(map(sum, r["plan"])) - 1.0) < 1e-9

# MMD
x = [[0.1, 0.2], [0.3, -0.4], [1.0, 0.5]]
assert g.mmd(x, x, bandwidth=0.5) == 0.0

# ranking metrics
ranked = g.rank([0.1, 0.9, 0.5, 0.9], exclude=[3])
assert ranked == [1, 2, 0], ranked
assert g.recall_at_k(ranked, [2], 2) == 1.0
assert abs(g.ndcg_at_k(ranked, [2], 2) - math.log(2) / math.log(3)) < 1e-12

# data, training, scoring, evaluation
data, emb = g.synthetic(users=120, seed=1)
assert data.num_users == 120 and data.num_items == 200
c = g.cost_from_embeddings(emb)
model = g.Model.train(data, c, epochs=2, batch_size=40, hidden=16, latent=4, n_unroll=10)
assert len(model.losses) == 6 and all(math.isfinite(v) for v in model.losses)
scores = model.score([data.row(0)])
assert len(scores) == 1 and len(scores[0]) == 200

pairs = []
for u in range(100, 120):
    row = data.row(u)
    cut = max(1, int(0.8 * len(row)))
    pairs.append((row[:cut], row[cut:]))
metrics = model.evaluate(pairs, cutoffs=[20, 100])
assert 0.0 <= metrics["ndcg@100"] <= 1.0

with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "model.bin")
    model.save(path)
    again = g.Model.load(path)
    assert again.score([data.row(0)]) == scores

print("pygeocf smoke test passed:", data, metrics)
