"""Encrypted inference over a loopback socket against a freshly trained model.

The client learns only the predicted labels; the server never sees the images.

    python3 demos/encrypted_inference.py
"""

import numpy as np

from securefl import federation as fed
from securefl import inference, nn
from securefl.data import derive_rng, synthetic_images


def main():
    x, y = synthetic_images(300, derive_rng(1, "train"))
    arch = nn.Architecture.from_tag("smallcnn:1x16x16:3")
    params, _, st, mean, std = fed.train_local(x / 255.0, y, arch, epochs=4, lr=0.1, batch_size=16, seed=1)
    print(f"trained {st['epochs_run']} epochs")

    srv = inference.start_server(params, port=0, seed=1)
    try:
        tx, ty = synthetic_images(8, derive_rng(1, "query"))
        q = ((tx / 255.0)[:, None] - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
        labels = inference.request_inference("127.0.0.1", srv.port, q, seed=2)
        plain = nn.predict(params, q)
        print("secure :", labels.tolist())
        print("plain  :", plain.tolist())
        print("truth  :", ty.tolist())
        print("secure == plain:", bool(np.array_equal(labels, plain)))
    finally:
        srv.shutdown()
        srv.server_close()


if __name__ == "__main__":
    main()
