#!/usr/bin/env python3
"""Regenerate the checked-in classifier and dataset fixtures.

Trains a small dense ReLU network on the bundled scikit-learn 8x8 digit
scans and freezes everything the tests need:

    tests/fixtures/digits-test-images-idx3-ubyte    300-item IDX subset
    tests/fixtures/digits-test-labels-idx1-ubyte
    tests/fixtures/mlp_digits.json                  weights document

Training caps the logit margin (cross-entropy plus a penalty on gaps
above MARGIN_CAP), which keeps accuracy high while pinning the decision
boundaries close to the data in input space.  The attack benchmarks
presume exactly that kind of boundary proximity; nets trained on this
toy set with plain cross-entropy end up far more noise-robust than
full-size image classifiers and would make the benchmarks meaningless.

The manifest records the accuracy of the exported (float32-rounded)
weights on the exported subset, computed with the package's own forward
pass, so tests can re-derive it bit for bit.  Needs torch and
scikit-learn, which are build-time tools here, not package dependencies.
"""

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from sklearn.datasets import load_digits

from percepta.classifiers import MlpLayer, MlpSpec, classify_batch, save_weights
from percepta.datasets import write_idx

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
SUBSET_PER_CLASS = 30
HIDDEN = (64, 32)
MARGIN_CAP = 0.75
MARGIN_WEIGHT = 1.0
EPOCHS = 250
SEED = 0


def train_network(train_x: torch.Tensor, train_y: torch.Tensor) -> nn.Sequential:
    torch.manual_seed(SEED)
    net = nn.Sequential(
        nn.Linear(64, HIDDEN[0]),
        nn.ReLU(),
        nn.Linear(HIDDEN[0], HIDDEN[1]),
        nn.ReLU(),
        nn.Linear(HIDDEN[1], 10),
    )
    optimizer = torch.optim.Adam(net.parameters(), lr=2e-3)
    cross_entropy = nn.CrossEntropyLoss()
    for _ in range(EPOCHS):
        perm = torch.randperm(len(train_x))
        for i in range(0, len(train_x), 128):
            idx = perm[i : i + 128]
            logits = net(train_x[idx])
            y = train_y[idx]
            true_logit = logits.gather(1, y[:, None]).squeeze(1)
            others = logits.clone()
            others.scatter_(1, y[:, None], -1e9)
            gap = true_logit - others.max(1).values
            loss = cross_entropy(logits, y) + MARGIN_WEIGHT * torch.relu(
                gap - MARGIN_CAP
            ).pow(2).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return net


def export_spec(net: nn.Sequential) -> MlpSpec:
    layers = []
    linear_modules = [m for m in net if isinstance(m, nn.Linear)]
    for k, module in enumerate(linear_modules):
        layers.append(
            MlpLayer(
                weight=module.weight.detach().numpy().astype(np.float32).astype(float),
                bias=module.bias.detach().numpy().astype(np.float32).astype(float),
                activation="relu" if k < len(linear_modules) - 1 else "none",
            )
        )
    return MlpSpec(layers=layers, num_classes=10, input_dim=64)


def main() -> None:
    digits = load_digits()
    images = (digits.images / 16.0)[:, None, :, :]
    labels = digits.target

    rng = np.random.default_rng(SEED)
    order = rng.permutation(len(labels))
    images, labels = images[order], labels[order]
    split = 1300
    train_x = torch.tensor(images[:split].reshape(split, -1), dtype=torch.float32)
    train_y = torch.tensor(labels[:split])
    test_x, test_y = images[split:], labels[split:]

    net = train_network(train_x, train_y)
    spec = export_spec(net)

    # balanced exported subset: the first SUBSET_PER_CLASS test items per class
    chosen = []
    for cls in range(10):
        idx = np.flatnonzero(test_y == cls)[:SUBSET_PER_CLASS]
        chosen.extend(idx.tolist())
    chosen = np.array(sorted(chosen))
    subset_x, subset_y = test_x[chosen], test_y[chosen]

    predicted = classify_batch(spec, [img.ravel() for img in subset_x])
    accuracy = float(np.mean(np.array(predicted) == subset_y))
    per_class_correct = {
        str(cls): int(np.sum((subset_y == cls) & (np.array(predicted) == subset_y)))
        for cls in range(10)
    }

    spec.note = (
        "dense 64-64-32-10 ReLU net on 8x8 digit scans, "
        "trained with a logit-margin cap"
    )
    spec.manifest = {
        "subset_accuracy": accuracy,
        "subset_size": int(len(subset_y)),
        "per_class_correct": per_class_correct,
        "hidden_units": list(HIDDEN),
        "margin_cap": MARGIN_CAP,
        "epochs": EPOCHS,
        "train_seed": SEED,
    }

    FIXTURES.mkdir(parents=True, exist_ok=True)
    save_weights(spec, FIXTURES / "mlp_digits.json")
    write_idx(
        subset_x,
        subset_y,
        FIXTURES / "digits-test-images-idx3-ubyte",
        FIXTURES / "digits-test-labels-idx1-ubyte",
    )
    print(f"subset accuracy {accuracy:.4f} over {len(subset_y)} items")
    print(f"per-class correct: {per_class_correct}")


if __name__ == "__main__":
    main()
