"""Convert the 10,000 MNIST digits bundled in the npm ``mnist`` package
(MIT, github.com/cazala/mnist) into a gzipped IDX image/label pair.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/prepare_mnist.py package/src/digits data/mnist

Pixels are stored in the package as value/255 rounded to three decimals;
rounding back to the nearest byte recovers the original 8-bit image.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from amnesiac.data import Dataset, write_idx
from amnesiac._rng import generator


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        imgs = np.rint(flat.reshape(-1, 28, 28) * 255.0) / 255.0
        images.append(imgs)
        labels.append(np.full(len(imgs), digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = generator(0, "prepare-mnist").permutation(len(labels))
    ds = Dataset(np.arange(len(labels)), images[order][:, None], labels[order], 10)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(ds, args.out_dir / "images-idx3-ubyte.gz", args.out_dir / "labels-idx1-ubyte.gz")
    print(f"wrote {len(ds)} examples to {args.out_dir}")


if __name__ == "__main__":
    main()
