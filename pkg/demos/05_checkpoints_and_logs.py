# Seeded runs are reproducible: same run log, byte-identical checkpoints.
import tempfile
from pathlib import Path

from lafavlad.config import miniature_config
from lafavlad.network import SegmentationNet
from lafavlad.numerics.checkpoint import read_arrays
from lafavlad.pointcloud_io import SyntheticSceneSpec, generate_synthetic_scene
from lafavlad.training import RunLog, train

tmp = Path(tempfile.mkdtemp())
cfg = miniature_config(epochs=3)
scene = generate_synthetic_scene(SyntheticSceneSpec(class_count=3, n_points=512, seed=7))

for run in ("a", "b"):
    model = SegmentationNet(cfg.network)
    train(model, scene, cfg.train, log_path=tmp / f"{run}.csv")
    model.save(tmp / f"{run}.ckpt")

print((tmp / "a.csv").read_text())
a, b = (tmp / "a.ckpt").read_bytes(), (tmp / "b.ckpt").read_bytes()
print("checkpoint size", len(a), "bytes, identical:", a == b)
print("header:", a[:16].hex(" "))

arrays = read_arrays(tmp / "a.ckpt")
print(len(arrays), "arrays, e.g.")
for name in list(arrays)[:4]:
    print(f"  {name:32s} {arrays[name].shape}")

logs = [RunLog.parse((tmp / f"{r}.csv").read_text()) for r in "ab"]
print("deterministic columns equal:", logs[0].deterministic_rows() == logs[1].deterministic_rows())
