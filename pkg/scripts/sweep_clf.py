"""Sweep classifier lr/epochs: confidence at 0.8 and raw-corpus localization."""
import sys
import time

import numpy as np

from dmlocate import synth
from dmlocate.classifier import Architecture, ClassifierNet, TrainConfig, predict_scores, train_classifier
from dmlocate.cam import class_activation_map
from dmlocate.evaluate import BBox, LocalizationRecord, accuracy_at_iou, cam_to_bbox, iou


def localization(net, samples, binarize=0.5):
    recs = []
    for s in samples:
        for box in s.boxes:
            c = box[0]
            amap = class_activation_map(net, s.image, c, s.index)
            pred = cam_to_bbox(amap.map, c, 64, binarize)
            gt = BBox(*box[1:], class_id=c)
            recs.append(LocalizationRecord(s.index, c, pred, gt, iou(pred, gt) if pred else 0.0))
    return recs


cfg = synth.DatasetConfig(seed=42, train=2000, val=300, test=500)
tax = synth.default_taxonomy(4)
corpus = synth.generate_dataset(cfg, tax)
test = corpus.splits["test"]
train_imgs = {c: np.stack([s.image for s in corpus.splits["train"] if s.labels[c] == 1])
              for c in range(4)}

for lr, epochs in [(1e-3, 5), (1e-3, 8), (3e-4, 8)]:
    net = ClassifierNet(Architecture(), seed=77)
    t0 = time.time()
    tr = train_classifier(net, corpus, TrainConfig(epochs=epochs, lr=lr, batch=32, seed=78))
    conf = []
    for c in range(4):
        sc = predict_scores(net, train_imgs[c])[:, c]
        conf.append(round(float((sc >= 0.8).mean()), 2))
    recs = localization(net, test)
    acc = accuracy_at_iou(recs, [0.3], 4)["0.3"]
    print(f"lr={lr:g} ep={epochs} {time.time()-t0:.0f}s vauc={tr.val_auc[-1]:.3f} "
          f"conf>=0.8 {conf} acc@0.3 {[None if v is None else round(v, 2) for v in acc['per_class']]} mean={acc['mean']:.3f}",
          flush=True)
