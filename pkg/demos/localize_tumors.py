"""Name the vertebrae each phantom tumor touches and the level it arises from."""

import numpy as np

from spinalis.core import Label, MaskVolume, VERTEBRA_NAMES
from spinalis.localize import fuse_tumor_with_labels, label_vertebrae
from spinalis.pipeline import generate_corpus


def main():
    for it in generate_corpus(6, 3):
        generic = np.isin(it.anatomy.data, range(Label.T11, Label.L5 + 1))
        labeling = label_vertebrae(MaskVolume(np.where(generic, Label.VERTEBRA, 0).astype(np.uint8),
                                              it.anatomy.spacing))
        rep = fuse_tumor_with_labels(it.truth, labeling).to_dict()
        print(f"{it.spec.tumor_type.display:>25} true {VERTEBRA_NAMES[it.spec.level]:>3}  "
              f"origin {rep['origin']:>3}  impacted {', '.join(rep['impacted'])}")


if __name__ == "__main__":
    main()
