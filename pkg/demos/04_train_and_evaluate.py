# Train the toy network on a synthetic desk scene, then evaluate it by crop voting.
# Takes about a minute on one core.
from lafavlad.config import toy_config
from lafavlad.losses_metrics import format_report
from lafavlad.network import SegmentationNet
from lafavlad.pointcloud_io import SyntheticSceneSpec, generate_synthetic_scene
from lafavlad.training import evaluate, train

scene = generate_synthetic_scene(SyntheticSceneSpec(class_count=3, n_points=16384, seed=7))
cfg = toy_config(epochs=25)
model = SegmentationNet(cfg.network)
print(model.count_parameters(), "parameters")


def show(rec):
    if rec.epoch % 5 == 0:
        print(f"epoch {rec.epoch:3d}  loss {rec.loss:.4f}  (wce {rec.wce:.4f}, "
              f"constraint {rec.constraint:.4f})  train OA {rec.oa:.3f}")


result = train(model, scene, cfg.train, on_epoch=show)

report = evaluate(model, scene, cfg.train.points)
print(f"\nvoted over {report.crops} crops")
print(format_report(report.confusion, ["floor", "box", "blob"]))
