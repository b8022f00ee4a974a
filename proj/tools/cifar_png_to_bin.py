#!/usr/bin/env python3
"""Convert the tfjs-cifar10 npm packaging (PNG sprite sheets + JSON labels)
into the standard CIFAR-10 binary layout read by `lakit`.

Each PNG row holds one 32x32 image stored pixel-interleaved (RGBRGB...).
The binary record is: 1 label byte, then 1024 R, 1024 G, 1024 B bytes.

Usage: cifar_png_to_bin.py <package_dir> <out_dir>
"""
import json
import os
import sys

import numpy as np
from PIL import Image


def convert(png_path, labels, out_path):
    rows = np.asarray(Image.open(png_path).convert("RGB"), dtype=np.uint8)
    if rows.shape[1] != 1024 or rows.shape[0] != len(labels):
        raise SystemExit(f"{png_path}: unexpected shape {rows.shape}")
    planes = rows.reshape(len(labels), 1024, 3).transpose(0, 2, 1).reshape(len(labels), 3072)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
    records.tofile(out_path)


def main():
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    src, dst = sys.argv[1], sys.argv[2]
    os.makedirs(dst, exist_ok=True)
    with open(os.path.join(src, "train_lables.json")) as f:
        train = json.load(f)
    with open(os.path.join(src, "test_lables.json")) as f:
        test = json.load(f)
    for b in range(5):
        convert(os.path.join(src, f"data_batch_{b + 1}.png"), train[b * 10000:(b + 1) * 10000],
                os.path.join(dst, f"data_batch_{b + 1}.bin"))
    convert(os.path.join(src, "test_batch.png"), test, os.path.join(dst, "test_batch.bin"))


if __name__ == "__main__":
    main()
