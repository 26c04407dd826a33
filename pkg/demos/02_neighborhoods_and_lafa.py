# Exact neighbors, the subsampling hierarchy, and what one LAFA unit computes.
import numpy as np

from lafavlad.lafa import LAFA
from lafavlad.neighborhood import build_hierarchy, knn
from lafavlad.numerics import ParamStore
from lafavlad.pointcloud_io import SyntheticSceneSpec, generate_synthetic_scene

cloud = generate_synthetic_scene(SyntheticSceneSpec(class_count=3, n_points=2048, seed=3))
print(len(cloud), "points, labels per class:", np.bincount(cloud.labels))

nbr = knn(cloud.positions, cloud.positions, 16)
print("first row of the 16-NN table (the point itself comes first):", nbr[0])

hier = build_hierarchy(cloud.positions, levels=3, k=16, ratio=4, seed=0)
print("level sizes:", hier.sizes)
print("upsampling table of level 0 maps", len(hier.upsample[0]), "points onto", hier.sizes[1])

rng = np.random.default_rng(0)
features = rng.normal(size=(len(cloud), 8))
unit = LAFA(ParamStore(), "demo", 8, 16, rng)
out = unit(cloud.positions, cloud.colors, features, nbr, True)
w = out.weights.data
print("output features:", out.features.shape)
print("adaptive weights:", w.shape, "sum over neighbors ranges",
      w.sum(axis=1).min(), "to", w.sum(axis=1).max())

# shuffling the neighbor order of every point changes nothing
perm = np.stack([rng.permutation(16) for _ in range(len(cloud))])
again = unit(cloud.positions, cloud.colors, features, np.take_along_axis(nbr, perm, 1), True)
print("max change after shuffling neighbors:", np.abs(again.features.data - out.features.data).max())
