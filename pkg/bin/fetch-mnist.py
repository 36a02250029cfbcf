#!/usr/bin/env python3
"""
Script to download the four MNIST IDX files into data/.
The library never downloads anything itself; run this once before training
with data.kind = "mnist".
"""

import argparse
import gzip
import sys
from pathlib import Path

import requests

DEFAULT_MIRROR = "https://storage.googleapis.com/cvdf-datasets/mnist/"
FILES = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
]


def fetch(url, timeout=60):
    """Download url and return the raw bytes.

    Raises:
        RuntimeError: On timeout or HTTP error.
    """
    try:
        response = requests.get(url, timeout=timeout)
        response.raise_for_status()
    except requests.exceptions.Timeout as e:
        raise RuntimeError(f"Timed out downloading {url}") from e
    except requests.exceptions.RequestException as e:
        raise RuntimeError(f"Cannot download {url}: {e}") from e
    return response.content


def main():
    bin_dir = Path(__file__).parent.absolute()
    project_root = bin_dir.parent.absolute()

    parser = argparse.ArgumentParser()
    parser.add_argument('--mirror', default=DEFAULT_MIRROR, help='Base URL serving the .gz files')
    parser.add_argument('--output', default=str(project_root / "data"), help='Target folder')
    parser.add_argument('--force', action='store_true', help='Download even if the file exists')
    args = parser.parse_args()

    data_dir = Path(args.output)
    data_dir.mkdir(parents=True, exist_ok=True)
    print(f"Fetching MNIST into {data_dir}")

    for index, name in enumerate(FILES, start=1):
        target = data_dir / name
        print(f"\n{index}. {name}")
        if target.exists() and not args.force:
            print(f"   ✓ Already present ({target.stat().st_size} bytes)")
            continue
        url = args.mirror.rstrip('/') + '/' + name + '.gz'
        try:
            payload = gzip.decompress(fetch(url))
        except (RuntimeError, OSError) as e:
            print(f"   ✗ Error: {e}")
            sys.exit(1)
        target.write_bytes(payload)
        print(f"   ✓ Saved {target} ({len(payload)} bytes)")

    print("\n✓ MNIST ready")


if __name__ == "__main__":
    main()
