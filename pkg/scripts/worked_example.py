#!/usr/bin/env python3
"""Print positions and the visibility matrix for X1 X2 {A B C}x2 X3 X4 {D E}."""
from aspd.layout import build_layout
from aspd.mask import VisibilityMode, build_full_mask

NAMES = ["X1", "X2", "A1", "B1", "C1", "A2", "B2", "C2", "X3", "X4", "D1", "E1"]
BLOCKS = [
    ("serial", 1), ("serial", 2),
    ("parallel", {1: 10, 2: 20, 3: 30}), ("parallel", {1: 11, 2: 21, 3: 31}),
    ("serial", 3), ("serial", 4),
    ("parallel", {1: 40, 2: 50}),
]


def main():
    layout = build_layout(BLOCKS)
    print("token    " + " ".join(f"{n:>3}" for n in NAMES))
    print("position " + " ".join(f"{p:>3}" for p in layout.position_ids()))
    for mode in VisibilityMode:
        print(f"\n{mode.value} visibility (row attends to column)")
        dense = build_full_mask(layout, mode).to_dense()
        print("    " + " ".join(f"{n:>3}" for n in NAMES))
        for name, row in zip(NAMES, dense):
            print(f"{name:>3} " + " ".join("  1" if v else "  ." for v in row))


if __name__ == "__main__":
    main()
