"""Write the {0,1,2} x 500 MNIST fixture used by the acceptance suite.

The digits come from the 5000-image MNIST sample (500 per class) bundled in
the mlxtend wheel: mlxtend/data/data/mnist_5k.csv.gz, one row per image with
784 pixel values followed by the label.

    python tools/make_mnist_subset.py path/to/mlxtend-*.whl tests/data/mnist012
"""

import argparse
import csv
import gzip
import io
import pathlib
import struct
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(wheel):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER)).decode()
    for row in csv.reader(io.StringIO(raw)):
        values = [int(float(v)) for v in row]
        yield values[:-1], values[-1]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel", type=pathlib.Path)
    parser.add_argument("out_prefix", type=pathlib.Path)
    parser.add_argument("--classes", default="0,1,2")
    parser.add_argument("--per-class", type=int, default=500)
    args = parser.parse_args()

    classes = [int(c) for c in args.classes.split(",")]
    picked = {c: [] for c in classes}
    for pixels, label in read_rows(args.wheel):
        if label in picked and len(picked[label]) < args.per_class:
            if len(pixels) != 784:
                raise SystemExit(f"expected 784 pixels, got {len(pixels)}")
            picked[label].append(pixels)
    for c, rows in picked.items():
        if len(rows) < args.per_class:
            raise SystemExit(f"class {c}: only {len(rows)} images")

    images = [(c, px) for c in classes for px in picked[c]]
    args.out_prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{args.out_prefix}-images.idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for _, px in images:
            f.write(bytes(px))
    with open(f"{args.out_prefix}-labels.idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(images)))
        f.write(bytes(c for c, _ in images))
    print(f"wrote {len(images)} images to {args.out_prefix}-*")


if __name__ == "__main__":
    main()
