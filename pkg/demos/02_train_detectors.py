"""Train the two toy victim detectors over one shared backbone.

The proposal-based detector scores candidate regions and then classifies
them (Faster-RCNN style); the regression-based detector predicts classes
and boxes densely per grid cell (SSD style). Passing the first detector's
backbone into the second training run freezes and shares it, which is what
makes feature-level attack transfer between the two families testable.
"""

from advdetect.data import generate_synthetic_dataset
from advdetect.detectors import DetectorConfig, train_toy_detector

train = generate_synthetic_dataset(150, 3, seed=1, split="train")
val = generate_synthetic_dataset(30, 3, seed=2, split="val")

cfg = DetectorConfig(epochs=25, eval_every=4, seed=0)
proposal = train_toy_detector("proposal", train, val, cfg)
print(f"proposal detector: held-out mAP {proposal.val_map:.3f}")

regression = train_toy_detector("regression", train, val, cfg, backbone=proposal.backbone)
print(f"regression detector: held-out mAP {regression.val_map:.3f}")
assert proposal.backbone_token == regression.backbone_token

img = val.entries[0].load()
print(f"\ndetections on one validation image (threshold 0.5):")
for name, det in (("proposal", proposal), ("regression", regression)):
    dets = det.detect(img, 0.5)
    print(f"  {name}: {[(d.label, round(d.confidence, 2)) for d in dets]}")
print(f"ground truth labels: {[o.label for o in val.entries[0].objects]}")
