"""Train the chain once, pickle everything, then analyze interactively."""
import pickle
import sys
import time

import numpy as np

from dmlocate import synth
from dmlocate.classifier import Architecture, ClassifierNet, TrainConfig, train_classifier
from dmlocate.aligner import AlignerNet, AlignTrainConfig, align_dataset, build_anchor, train_aligner
from dmlocate.masks import MaskBuildConfig, build_mask, collect_high_quality, mask_stack

OUT = "/tmp/chain_cache"


def main(seed=42, n=2000):
    cfg = synth.DatasetConfig(seed=seed, train=n, val=300, test=500)
    tax = synth.default_taxonomy(4)
    corpus = synth.generate_dataset(cfg, tax)

    base = ClassifierNet(Architecture(), seed=seed * 7 + 1)
    train_classifier(base, corpus, TrainConfig(epochs=5, lr=1e-3, seed=seed * 7 + 2))
    normals = [s.image for s in corpus.normals("train")]
    anchor = build_anchor(normals, min(500, len(normals)), seed=seed * 7 + 3)
    al = AlignerNet(64, seed=seed * 7 + 4)
    train_aligner(al, corpus, anchor, base, AlignTrainConfig(epochs=5, seed=seed * 7 + 5))
    aligned = align_dataset(al, corpus)
    s1 = ClassifierNet(Architecture(), seed=seed * 7 + 6)
    train_classifier(s1, aligned, TrainConfig(epochs=5, lr=1e-3, seed=seed * 7 + 7))
    s1.save(OUT + "/s1")
    mcfg = MaskBuildConfig()
    dms = [build_mask(collect_high_quality(s1, aligned.splits["train"], c, 0.8), c, mcfg)
           for c in range(4)]
    mstack = mask_stack(dms)
    s2 = ClassifierNet(Architecture(), seed=seed * 7 + 6)
    for p, q in zip(s2.params(), s1.params()):
        p.value[...] = q.value
    train_classifier(s2, aligned, TrainConfig(epochs=5, lr=1e-3, seed=seed * 7 + 8), masks=mstack)

    base.save(OUT + "/base")
    s2.save(OUT + "/s2")
    al.save(OUT + "/al")
    with open(OUT + "/data.pkl", "wb") as fh:
        pickle.dump({"corpus": corpus, "aligned": aligned, "mstack": mstack,
                     "anchor": anchor, "seed": seed}, fh)
    print("cached to", OUT)


if __name__ == "__main__":
    main(seed=int(sys.argv[1]) if len(sys.argv) > 1 else 42,
         n=int(sys.argv[2]) if len(sys.argv) > 2 else 2000)
