#!/usr/bin/env python3
"""Write torchvision ResNet-50 ImageNet weights as an MGNTENS1 tensor archive.

Usage: convert_torchvision.py OUT.bin [--random]

The archive keeps torchvision tensor names; data/resnet50_torchvision_map.json
renames them to backbone names at load time.
"""

import argparse
import struct

import torch
import torchvision


def write_archive(path, tensors):
    with open(path, "wb") as f:
        f.write(b"MGNTENS1")
        f.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            t = tensors[name].detach().to(torch.float32).contiguous()
            encoded = name.encode()
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", t.dim()))
            f.write(struct.pack(f"<{t.dim()}q", *t.shape))
            f.write(t.numpy().astype("<f4").tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out")
    parser.add_argument("--random", action="store_true", help="skip the download and use random weights")
    args = parser.parse_args()
    weights = None if args.random else torchvision.models.ResNet50_Weights.IMAGENET1K_V1
    model = torchvision.models.resnet50(weights=weights)
    tensors = {k: v for k, v in model.state_dict().items() if not k.endswith("num_batches_tracked")}
    write_archive(args.out, tensors)
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
