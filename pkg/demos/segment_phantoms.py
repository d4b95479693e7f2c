"""Train the FCM+RF segmenter on a handful of phantoms and score a held-out one.

    python demos/segment_phantoms.py [--count 10] [--out demo_out]
"""

import argparse
from pathlib import Path

from spinalis.core import Label
from spinalis.forest import ForestConfig
from spinalis.metrics import dice
from spinalis.phantom import PhantomConfig
from spinalis.pipeline import generate_corpus, split_corpus
from spinalis.segment import SegmenterConfig, segment_volume, train_segmenter


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--count", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()

    corpus = generate_corpus(args.count, args.seed, PhantomConfig(width=144, height=192, depth=16))
    train_ids, test_ids = split_corpus([it.source_id for it in corpus], 0.8, args.seed)
    by_id = {it.source_id: it for it in corpus}
    cfg = SegmenterConfig(forest=ForestConfig(n_trees=10, max_depth=12, min_samples_leaf=5, seed=args.seed))
    model = train_segmenter([(by_id[i].volume, by_id[i].truth) for i in train_ids], cfg)

    out = Path(args.out)
    for sid in test_ids:
        it = by_id[sid]
        res = segment_volume(it.volume, model)
        d = dice(res.mask.data == Label.TUMOR, it.truth.data == Label.TUMOR)
        relevant = [z for z, r in enumerate(res.relevant) if r]
        print(f"{sid} {it.spec.tumor_type.display:>25}  Dice {d:.3f}  relevant planes {relevant}")
        res.save(out, sid)
    print(f"masks and probability maps written to {out}/")


if __name__ == "__main__":
    main()
