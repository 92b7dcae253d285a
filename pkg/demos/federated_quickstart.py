"""Three-node federated training with secret-shared aggregation on synthetic data.

    python3 demos/federated_quickstart.py
"""

import numpy as np

from securefl import federation as fed
from securefl import metrics, nn
from securefl.data import derive_rng, synthetic_images


def main():
    nodes = []
    for k in range(3):
        x, y = synthetic_images(200, derive_rng(0, "synthetic", k))
        nodes.append((x / 255.0, y))
    tx, ty = synthetic_images(300, derive_rng(0, "synthetic", "test"))

    for secure in (True, False):
        cfg = fed.FederationConfig(nodes=3, rounds=4, local_epochs=2, secure=secure, seed=0)
        res = fed.run_federation(cfg, nodes)
        print(f"--- {'secure' if secure else 'plain'} aggregation")
        for r in res.reports:
            dev = f" dev={r.max_dev_vs_plain:.1e}" if r.max_dev_vs_plain is not None else ""
            print(f"round {r.round}: loss={np.mean(r.train_loss):.4f} val_mcc={r.val_mcc:.4f} "
                  f"comm_rounds={r.comm_rounds} bytes={r.bytes}{dev}")
        pred = nn.predict(res.params, res.normalize((tx / 255.0)[:, None]))
        rep = metrics.metrics_report(ty, pred, num_classes=3)
        print(f"test accuracy={rep.accuracy:.4f} mcc={rep.mcc:.4f}")


if __name__ == "__main__":
    main()
