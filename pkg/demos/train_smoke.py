# coding: utf-8

# # Overfitting a toy problem
#
# Sixty-four 40-frame sequences in four Gaussian classes. A scaled model
# (20 input coefficients) should hit 100% train accuracy quickly, after which
# the stop rule waits for the loss to flatten.

import numpy as np

from pipmn import PipConfig, PipmnModel
from pipmn.train import array_batches, feature_stats, smoothed_ce_floor, train

rng = np.random.default_rng(0)
means = rng.normal(0, 1, (4, 20))
y = np.repeat(np.arange(4), 16)
x = (means[y][:, None, :] + rng.normal(0, 1, (64, 40, 20))).astype(np.float32)

model = PipmnModel(PipConfig(in_dim=20, num_classes=4), seed=0)
batches = array_batches(x, y, batch_size=16, seed=0)
model.set_feature_stats(*feature_stats(batches(0)))


def show(row):
    if row["epoch"] % 10 == 0 or row["epoch"] <= 3:
        print(f"epoch {row['epoch']:>3}  loss {row['train_loss']:.4f}  acc {row['train_acc']:.3f}")


result = train(model, batches, epochs=200, seed=0, on_epoch=show)
log = result.runlog
print("stopped early:", log.stopped_early, "at epoch", log.stop_epoch)

# With label smoothing 0.1 the loss cannot go below the entropy of the
# smoothed target.

print(f"final loss {log.epochs[-1]['train_loss']:.4f} vs floor {smoothed_ce_floor(4):.4f}")

# Ten-epoch window means of the loss never go up.

loss = np.array([e["train_loss"] for e in log.epochs])
print(np.round(loss[:len(loss) // 10 * 10].reshape(-1, 10).mean(axis=1), 4))
