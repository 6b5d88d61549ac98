#!/usr/bin/env python3
"""Generate the backbone parameter-manifest goldens from a layer dump.

The dump is produced by instantiating the 13 reference Keras backbones
(include_top=False, input 150x150x3) in one Python session and recording
every layer's name, class, output shape, and weight shapes. Layer names
are renumbered to canonical fresh-session form and weight tensors named
per class, then everything is written as one JSON file the manifest test
compares against.

Usage: gen_manifest_goldens.py DUMP_JSON OUT_JSON
"""

import json
import sys

from kerasnames import canonical_names, weight_keys


def main():
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    dump = json.load(open(sys.argv[1]))
    golden = {}
    for model_id, model in dump.items():
        layers = model["layers"]
        renamed = canonical_names([(l["name"], l["cls"]) for l in layers])
        params = {}
        for layer in layers:
            shapes = layer.get("weights") or []
            if not shapes:
                continue
            name = renamed[layer["name"]]
            keys = weight_keys(layer["cls"], len(shapes), f"{model_id}/{layer['name']}")
            for key, shape in zip(keys, shapes):
                full = f"{name}/{key}"
                assert full not in params, f"{model_id}: duplicate {full}"
                params[full] = shape
        counted = 0
        for s in params.values():
            n = 1
            for d in s:
                n *= d
            counted += n
        assert counted == model["total_params"], (
            f"{model_id}: counted {counted} != reported {model['total_params']}"
        )
        out = model["out_shape"]
        golden[model_id] = {
            "total_params": model["total_params"],
            "feature_node": renamed[model["last_layer"]],
            "feature_shape": [out[3], out[1], out[2]],
            "params": params,
        }
    with open(sys.argv[2], "w") as f:
        json.dump(golden, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    total = sum(len(g["params"]) for g in golden.values())
    print(f"wrote {len(golden)} models, {total} parameter tensors")


if __name__ == "__main__":
    main()
