"""Convert the digits bundled in the npm `mnist` package into IDX files.

Usage: python3 scripts/mnist_from_npm.py <package/src/digits> <out_dir>

Writes train (first 600 per class, interleaved) and validation (the rest)
splits as IDX3 image / IDX1 label files.
"""
import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 600


def write_idx(out, images, labels):
    with open(out + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(out + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    per_class = []
    for digit in range(10):
        text = (src / f"{digit}.json").read_text()
        data = json.loads(text)["data"]
        n = len(data) // 784
        imgs = [
            [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            for i in range(n)
        ]
        per_class.append(imgs)
    # round-robin over classes so file order is not sorted by label
    train = [
        (per_class[digit][i], digit)
        for i in range(TRAIN_PER_CLASS)
        for digit in range(10)
    ]
    val = [
        (img, digit)
        for digit, imgs in enumerate(per_class)
        for img in imgs[TRAIN_PER_CLASS:]
    ]
    write_idx(str(dst / "train"), [t[0] for t in train], [t[1] for t in train])
    write_idx(str(dst / "t10k"), [t[0] for t in val], [t[1] for t in val])
    print(f"train={len(train)} validation={len(val)}")


if __name__ == "__main__":
    main()
