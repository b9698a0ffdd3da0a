#!/usr/bin/env python3
"""Convert the public Cora citation dataset (McCallum format) into the
dataset directory layout this project reads.

Input: a directory containing `cora.content` and `cora.cites`
(https://linqs-data.soe.ucsc.edu/public/lbc/cora.tgz).

Output: edges.txt, features.csv, labels.csv, masks.txt.

The split is Planetoid-style in size (140 train / 500 val / 1000 test):
20 training nodes per class by node order, the next 500 remaining nodes as
validation, and the last 1000 nodes as test. Node ids follow the order of
cora.content.

Usage: convert_cora.py <cora_dir> <out_dir>
"""

import sys
from pathlib import Path


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__)
        return 2
    src = Path(sys.argv[1])
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)

    ids = []
    feats = []
    label_names = []
    with open(src / "cora.content") as f:
        for line in f:
            parts = line.strip().split()
            if not parts:
                continue
            ids.append(parts[0])
            feats.append(parts[1:-1])
            label_names.append(parts[-1])

    index = {pid: i for i, pid in enumerate(ids)}
    classes = {name: k for k, name in enumerate(sorted(set(label_names)))}
    labels = [classes[name] for name in label_names]
    n = len(ids)

    edges = set()
    skipped = 0
    with open(src / "cora.cites") as f:
        for line in f:
            parts = line.strip().split()
            if len(parts) != 2:
                continue
            a, b = parts
            if a not in index or b not in index:
                skipped += 1
                continue
            u, v = index[a], index[b]
            if u != v:
                edges.add((min(u, v), max(u, v)))

    with open(out / "edges.txt", "w") as f:
        for u, v in sorted(edges):
            f.write(f"{u} {v}\n")
    with open(out / "features.csv", "w") as f:
        for row in feats:
            f.write(",".join(row) + "\n")
    with open(out / "labels.csv", "w") as f:
        for y in labels:
            f.write(f"{y}\n")

    per_class = {}
    train = []
    for i, y in enumerate(labels):
        if per_class.get(y, 0) < 20:
            per_class[y] = per_class.get(y, 0) + 1
            train.append(i)
    train_set = set(train)
    test = [i for i in range(n - 1000, n) if i not in train_set]
    taken = train_set | set(test)
    val = [i for i in range(n) if i not in taken][:500]

    with open(out / "masks.txt", "w") as f:
        f.write("train: " + " ".join(map(str, sorted(train))) + "\n")
        f.write("val: " + " ".join(map(str, sorted(val))) + "\n")
        f.write("test: " + " ".join(map(str, sorted(test))) + "\n")

    print(
        f"wrote {n} nodes, {len(edges)} undirected edges, {len(feats[0])} features, "
        f"{len(classes)} classes ({skipped} dangling citations skipped)"
    )
    print(f"masks: {len(train)} train / {len(val)} val / {len(test)} test")
    return 0


if __name__ == "__main__":
    sys.exit(main())
