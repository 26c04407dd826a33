# A C-VLAD descriptor: one VLAD vector per encoder level, concatenated.
import numpy as np

from lafavlad.cvlad import cvlad_forward, init_vlad_layer, soft_assignment
from lafavlad.numerics import DiffArray, ParamStore

rng = np.random.default_rng(1)
widths, sizes, clusters = (8, 16, 32), (256, 64, 16), 16
store = ParamStore()
layers = [init_vlad_layer(store, f"vlad{i}", w, clusters, rng) for i, w in enumerate(widths)]
levels = [DiffArray(rng.normal(size=(n, w))) for n, w in zip(sizes, widths)]

a = soft_assignment(levels[0], layers[0]).data
print("soft assignment of the first 3 points to the 16 clusters, rows sum to 1:")
print(np.round(a[:3], 3), a[:3].sum(axis=1))

desc = cvlad_forward(levels, layers)
print("descriptor length", desc.length, "= 16 x (8 + 16 + 32)")
for (start, stop), w in zip(desc.slices, widths):
    print(f"  level width {w:2d}: entries {start}..{stop}")

# the descriptor ignores point order within a level
shuffled = [DiffArray(x.data[rng.permutation(len(x.data))]) for x in levels]
print("max change after shuffling points:",
      np.abs(cvlad_forward(shuffled, layers).vector.data - desc.vector.data).max())
