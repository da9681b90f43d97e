"""Train the CAM model on image labels only and turn its CAMs into pixel seeds.

Run:  python3 demos/02_cam_training.py      (well under a minute on one core)

The model never sees a mask. After training, the fine CAM (attention-refined)
and the coarse CAM (conv head on patch tokens) are each converted to pixel
seeds and scored against the hidden ground truth.

At this desk scale (no pretrained encoder, a few hundred tiny images) the
attention refinement is not guaranteed to help: with longer training the
patch-to-patch attention tends to concentrate on a few tokens, and the fine
CAM can score below the coarse one. The printout shows whichever happens.
"""

import numpy as np

from weaktr.synthetic import DataConfig, generate_split, stack_split
from weaktr.training import (SeedConfig, TrainConfig, compute_cams, evaluate_seeds,
                             multilabel_accuracy, seeds_from_cams, train_cam)
from weaktr.vit import EncoderConfig

SIZE, CLASSES = 32, 3
data_cfg = DataConfig(image_size=SIZE, num_classes=CLASSES)
train = generate_split("train", 160, 0, data_cfg)
enc_cfg = EncoderConfig(image_size=SIZE, patch_size=8, num_classes=CLASSES, embed_dim=16, layers=2, heads=2)

model, curve = train_cam(TrainConfig(epochs=30, batch_size=8, warmup_epochs=5), train, enc_cfg)
print("epoch losses:", " ".join(f"{x:.3f}" for x in curve["epoch_loss"]))

images, labels, _ = stack_split(train)
cams = compute_cams(model, images)
print(f"multi-label accuracy on the training images: {multilabel_accuracy(cams['logits'], labels):.3f}")

seed_cfg = SeedConfig(background_threshold=0.4)
for kind in ("cam_coarse", "cam_fine"):
    seeds = seeds_from_cams(cams[kind], labels, seed_cfg, SIZE)
    report = evaluate_seeds(seeds, train, CLASSES + 1)
    print(f"{kind:10s} seed mIoU {report.miou:.3f}  per-class IoU {np.round(report.per_class_iou, 3)}")

# the learned head weights stay strictly inside (0, 1)
wprime = model.forward(images[:1])[0].weights_wprime.data
print("learned head weights for image 0:", np.round(wprime[0], 3))
