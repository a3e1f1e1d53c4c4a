"""Convert a PYPOWER case dict into the native JSON case schema.

Usage: python scripts/convert_pypower_case.py case118 > src/gnnse/data/case118.json
"""
import json
import sys

import numpy as np
import pypower.api

KINDS = {1: "pq", 2: "pv", 3: "slack"}


def convert(ppc):
    gens = {}
    for g in ppc["gen"]:
        if g[7] <= 0:
            continue
        bus = int(g[0])
        p, vg = gens.get(bus, (0.0, None))
        gens[bus] = (p + float(g[1]), float(g[5]))
    buses = []
    for b in ppc["bus"]:
        bid = int(b[0])
        p_gen, v_set = gens.get(bid, (0.0, None))
        buses.append({
            "id": bid, "kind": KINDS[int(b[1])],
            "p_load": float(b[2]), "q_load": float(b[3]),
            "gs": float(b[4]), "bs": float(b[5]), "base_kv": float(b[9]),
            "vm": float(b[7]), "va": float(b[8]),
            "v_set": v_set if v_set is not None else float(b[7]),
            "p_gen": p_gen,
        })
    branches = []
    for br in ppc["branch"]:
        branches.append({
            "from": int(br[0]), "to": int(br[1]),
            "r": float(br[2]), "x": float(br[3]), "b": float(br[4]),
            "tap": float(br[8]) if br[8] != 0 else 1.0, "shift": float(br[9]),
            "status": int(br[10]),
        })
    return {"base_mva": float(ppc["baseMVA"]), "buses": buses, "branches": branches}


if __name__ == "__main__":
    ppc = getattr(pypower.api, sys.argv[1])()
    doc = convert(ppc)
    # one record per line keeps diffs readable
    out = ['{', f'  "base_mva": {json.dumps(doc["base_mva"])},', '  "buses": [']
    out += [f"    {json.dumps(b)}," for b in doc["buses"]]
    out[-1] = out[-1].rstrip(",")
    out += ['  ],', '  "branches": [']
    out += [f"    {json.dumps(b)}," for b in doc["branches"]]
    out[-1] = out[-1].rstrip(",")
    out += ['  ]', '}']
    print("\n".join(out))
