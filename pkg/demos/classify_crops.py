"""Train the tumor-type CNN on phantom crops and print a confusion matrix.

Takes a few minutes on one core with the defaults.
"""

import argparse

import numpy as np

from spinalis.cnn import TrainConfig, cnn_predict_proba
from spinalis.phantom import TumorType
from spinalis.pipeline import classification_dataset, run_classification


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--train", type=int, default=150)
    ap.add_argument("--test", type=int, default=30)
    ap.add_argument("--epochs", type=int, default=8)
    args = ap.parse_args()

    train = classification_dataset(args.train, 1)
    test = classification_dataset(args.test, 2)
    model, report = run_classification(train, test, TrainConfig(epochs=args.epochs))
    print("train loss per epoch:", " ".join(f"{v:.3f}" for v in report["train_loss"]))
    pred = np.argmax(cnn_predict_proba(model, test[0]), axis=1)
    cm = np.zeros((3, 3), dtype=int)
    np.add.at(cm, (test[1], pred), 1)
    names = [TumorType(i).display for i in range(3)]
    print(f"{'':>25} " + " ".join(f"{n[:8]:>8}" for n in names))
    for name, row in zip(names, cm):
        print(f"{name:>25} " + " ".join(f"{v:>8d}" for v in row))
    print(f"test accuracy {report['test_accuracy']:.3f}")


if __name__ == "__main__":
    main()
