"""Dump CAM grids, masks, and box geometry to understand localization failures."""
import numpy as np

from dmlocate import synth
from dmlocate.classifier import Architecture, ClassifierNet, TrainConfig, predict_scores, train_classifier
from dmlocate.aligner import AlignerNet, AlignTrainConfig, align_dataset, build_anchor, train_aligner
from dmlocate.cam import attention_cam, class_activation_map
from dmlocate.evaluate import BBox, cam_to_bbox, iou
from dmlocate.masks import MaskBuildConfig, build_mask, collect_high_quality, mask_stack


def show(arr, fmt="{:5.2f}"):
    for row in arr:
        print("   " + " ".join(fmt.format(v) for v in row))


def main():
    cfg = synth.DatasetConfig(seed=42, train=2000, val=300, test=300)
    tax = synth.default_taxonomy(4)
    corpus = synth.generate_dataset(cfg, tax)

    base = ClassifierNet(Architecture(), seed=295)
    train_classifier(base, corpus, TrainConfig(epochs=5, seed=296))
    normals = [s.image for s in corpus.normals("train")]
    anchor = build_anchor(normals, min(500, len(normals)), seed=3)
    al = AlignerNet(64, seed=4)
    train_aligner(al, corpus, anchor, base, AlignTrainConfig(epochs=5, seed=5))
    aligned = align_dataset(al, corpus)
    s1 = ClassifierNet(Architecture(), seed=6)
    train_classifier(s1, aligned, TrainConfig(epochs=5, seed=7))

    mcfg = MaskBuildConfig()
    dms = [build_mask(collect_high_quality(s1, aligned.splits["train"], c, 0.8), c, mcfg)
           for c in range(4)]
    for c in range(4):
        print(f"=== mask class {c} (N={dms[c].meta['n_maps']}) ===")
        show(dms[c].mask)

    # examine a few positive test samples per class
    for c in range(4):
        print(f"=== class {c} sample CAMs (stage-1 aligned) ===")
        shown = 0
        for s in aligned.splits["test"]:
            boxes = [b for b in s.boxes if b[0] == c]
            if not boxes:
                continue
            amap = class_activation_map(s1, s.image, c, s.index)
            pred = cam_to_bbox(amap.map, c, 64, 0.5)
            gt = BBox(*boxes[0][1:], class_id=c)
            i = iou(pred, gt) if pred else 0.0
            print(f" sample {s.index} gt=({gt.x:.0f},{gt.y:.0f},{gt.w:.0f},{gt.h:.0f}) "
                  f"pred={None if pred is None else (round(pred.x), round(pred.y), round(pred.w), round(pred.h))} iou={i:.2f}")
            show(amap.map)
            shown += 1
            if shown >= 2:
                break


main()
