"""Write the parametric arch phantom as an STL (millimetres) for inspection or reuse.

    python scripts/export_phantom.py phantom.stl --lcca-length 18
"""

import argparse
import dataclasses

from endonav.anatomy import write_stl
from endonav.phantom import BranchPhantom


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path")
    ap.add_argument("--ascii", action="store_true")
    for f in dataclasses.fields(BranchPhantom):
        ap.add_argument("--" + f.name.replace("_", "-"), type=float, default=f.default)
    args = ap.parse_args()
    ph = BranchPhantom(**{f.name: getattr(args, f.name) for f in dataclasses.fields(BranchPhantom)})
    verts, tris = ph.triangulate()
    write_stl(args.path, verts, tris, ascii=args.ascii)
    print(f"{len(tris)} triangles written to {args.path}")
    print("target (mm):", ph.branch_point("lcca", 10.0).round(3).tolist())
    print("forbidden (mm):", ph.branch_point("lsa", 8.0).round(3).tolist())


if __name__ == "__main__":
    main()
