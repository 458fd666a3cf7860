"""Manual probe of the three-variant localization ordering before pipeline wiring."""
import sys
import time

import numpy as np

from dmlocate import synth
from dmlocate.classifier import (Architecture, ClassifierNet, TrainConfig,
                                 predict_scores, train_classifier)
from dmlocate.aligner import (AlignerNet, AlignTrainConfig, align_dataset,
                              build_anchor, train_aligner)
from dmlocate.cam import attention_cam, class_activation_map
from dmlocate.evaluate import BBox, LocalizationRecord, accuracy_at_iou, cam_to_bbox, iou, roc_auc
from dmlocate.masks import MaskBuildConfig, build_mask, collect_high_quality, mask_stack


def localize(net, split_samples, image_size, masks=None, binarize=0.5):
    records = []
    for s in split_samples:
        for box in s.boxes:
            c = box[0]
            if masks is None:
                amap = class_activation_map(net, s.image, c, s.index)
            else:
                amap = attention_cam(net, s.image, c, masks[c], s.index)
            pred = cam_to_bbox(amap.map, c, image_size, binarize)
            gt = BBox(*box[1:], class_id=c)
            records.append(LocalizationRecord(s.index, c, pred, gt,
                                              iou(pred, gt) if pred else 0.0))
    return records


def aucs(net, corpus_like, split, masks=None):
    samples = corpus_like.splits[split]
    scores = predict_scores(net, np.stack([s.image for s in samples]), masks=masks)
    labels = np.stack([s.labels for s in samples])
    out = []
    for c in range(labels.shape[1]):
        col = labels[:, c]
        out.append(roc_auc(scores[:, c].tolist(), col.tolist()))
    return out


def main(seed=42, train_n=4000, epochs1=5, epochs2=5):
    t_all = time.time()
    cfg = synth.DatasetConfig(seed=seed, train=train_n, val=500, test=1000)
    tax = synth.default_taxonomy(4)
    t0 = time.time()
    corpus = synth.generate_dataset(cfg, tax)
    print(f"corpus {time.time()-t0:.0f}s  positives {corpus.report['positives_per_class']['test']}")

    # variant: base
    base = ClassifierNet(Architecture(), seed=seed * 7 + 1)
    t0 = time.time()
    tr = train_classifier(base, corpus, TrainConfig(epochs=epochs1, lr=1e-3, batch=32, seed=seed * 7 + 2))
    print(f"base clf {time.time()-t0:.0f}s loss={tr.epoch_loss[-1]:.2f} vauc={tr.val_auc[-1]:.3f}")
    rec_base = localize(base, corpus.splits["test"], 64)
    acc_base = accuracy_at_iou(rec_base, [0.3, 0.5, 0.7], 4)

    # aligner
    normals = [s.image for s in corpus.normals("train")]
    anchor = build_anchor(normals, min(500, len(normals)), seed=seed * 7 + 3)
    al = AlignerNet(64, seed=seed * 7 + 4)
    t0 = time.time()
    atr = train_aligner(al, corpus, anchor, base, AlignTrainConfig(epochs=5, seed=seed * 7 + 5))
    aligned = align_dataset(al, corpus)
    print(f"aligner {time.time()-t0:.0f}s val {atr.val_total[0]:.0f}->{atr.val_total[-1]:.0f}")

    # variant: base+align
    s1 = ClassifierNet(Architecture(), seed=seed * 7 + 6)
    t0 = time.time()
    tr1 = train_classifier(s1, aligned, TrainConfig(epochs=epochs1, lr=1e-3, batch=32, seed=seed * 7 + 7))
    print(f"stage1 clf {time.time()-t0:.0f}s loss={tr1.epoch_loss[-1]:.2f} vauc={tr1.val_auc[-1]:.3f}")
    rec_align = localize(s1, aligned.splits["test"], 64)
    acc_align = accuracy_at_iou(rec_align, [0.3, 0.5, 0.7], 4)

    # masks from stage-1 on aligned train
    mcfg = MaskBuildConfig()
    dms = []
    for c in range(4):
        try:
            maps = collect_high_quality(s1, aligned.splits["train"], c, mcfg.score_threshold)
        except Exception as e:
            print(f"mask class {c}: {e}")
            scores = predict_scores(s1, np.stack([s.image for s in aligned.splits['train'] if s.labels[c] == 1]))[:, c]
            print(f"  pos score stats: mean {scores.mean():.3f} max {scores.max():.3f} >=0.8 {(scores>=0.8).sum()}")
            sys.exit(1)
        print(f"mask class {c}: N_c={len(maps)}")
        dms.append(build_mask(maps, c, mcfg))
    mstack = mask_stack(dms)

    # variant: base+align+dm (stage 2 continues from stage-1 weights)
    t0 = time.time()
    tr2 = train_classifier(s1, aligned, TrainConfig(epochs=epochs2, lr=1e-3, batch=32, seed=seed * 7 + 8), masks=mstack)
    print(f"stage2 clf {time.time()-t0:.0f}s loss={tr2.epoch_loss[-1]:.2f} vauc={tr2.val_auc[-1]:.3f}")
    rec_dm = localize(s1, aligned.splits["test"], 64, masks=mstack)
    acc_dm = accuracy_at_iou(rec_dm, [0.3, 0.5, 0.7], 4)

    for name, acc in (("base", acc_base), ("align", acc_align), ("dm", acc_dm)):
        row = acc["0.3"]
        print(f"{name:6s} acc@0.3 per-class {[None if v is None else round(v,2) for v in row['per_class']]} mean {row['mean']:.3f}"
              f" | @0.5 {acc['0.5']['mean']:.3f} | @0.7 {acc['0.7']['mean']:.3f}")
    print(f"AUC base {np.mean(aucs(base, corpus, 'test')):.3f} "
          f"align {np.mean(aucs(s1, aligned, 'test', masks=mstack)):.3f}")
    print(f"total {time.time()-t_all:.0f}s")
    b, a, d = acc_base["0.3"]["mean"], acc_align["0.3"]["mean"], acc_dm["0.3"]["mean"]
    print(f"ORDER: dm({d:.3f}) >= align({a:.3f}) >= base({b:.3f}) margin {d-b:.3f}",
          "OK" if d >= a >= b and d - b >= 0.05 else "VIOLATED")


if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 42
    n = int(sys.argv[2]) if len(sys.argv) > 2 else 4000
    main(seed=seed, train_n=n)
