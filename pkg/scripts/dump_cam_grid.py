"""Print CAM grids next to ground truth geometry for failing classes."""
import numpy as np

from dmlocate import synth
from dmlocate.classifier import Architecture, ClassifierNet, TrainConfig, train_classifier
from dmlocate.cam import class_activation_map
from dmlocate.evaluate import BBox, cam_to_bbox, iou
from dmlocate.ops import minmax_normalize

cfg = synth.DatasetConfig(seed=42, train=2000, val=300, test=300)
tax = synth.default_taxonomy(4)
corpus = synth.generate_dataset(cfg, tax)
net = ClassifierNet(Architecture(), seed=77)
train_classifier(net, corpus, TrainConfig(epochs=8, lr=1e-3, batch=32, seed=78))

for c in [1, 2]:
    print(f"##### class {c}")
    shown = 0
    for s in corpus.splits["test"]:
        boxes = [b for b in s.boxes if b[0] == c]
        if not boxes or s.labels.sum() > 1:
            continue
        amap = class_activation_map(net, s.image, c, s.index)
        pred = cam_to_bbox(amap.map, c, 64, 0.5)
        gt = BBox(*boxes[0][1:], class_id=c)
        print(f"sample {s.index}: gt center=({gt.x+gt.w/2:.0f},{gt.y+gt.h/2:.0f}) size=({gt.w:.0f}x{gt.h:.0f})"
              f" pred={None if pred is None else (round(pred.x+pred.w/2), round(pred.y+pred.h/2), round(pred.w), round(pred.h))}"
              f" iou={iou(pred, gt) if pred else 0:.2f}")
        norm = minmax_normalize(amap.map).value
        for i, row in enumerate(norm):
            marks = []
            for j, v in enumerate(row):
                cell_x, cell_y = (j + 0.5) * 8, (i + 0.5) * 8
                inside = gt.x <= cell_x <= gt.x + gt.w and gt.y <= cell_y <= gt.y + gt.h
                marks.append(f"{v:4.2f}{'*' if inside else ' '}")
            print("  " + " ".join(marks))
        shown += 1
        if shown >= 3:
            break
