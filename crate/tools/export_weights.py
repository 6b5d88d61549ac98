#!/usr/bin/env python3
"""Export Keras backbone weights to the toolkit's .pxwt format.

For each requested backbone the reference Keras model is instantiated at
150x150x3 without its classifier top, its weights are written out under
canonical names (see kerasnames.py), and the result can be loaded by the
Rust side with `WeightInit::Imagenet`.

With --probe, the exporter also embeds a deterministic test batch and the
model's feature activations for it (entries `__probe_input__` and
`__probe_feature__`, both channel-first), which the `probe_parity`
example checks against the Rust forward pass.

With --randomize, batch-norm statistics, normalization statistics, and
biases are filled from a seeded RNG instead of their inert defaults so a
parity probe exercises those code paths meaningfully.

EfficientNet built with imagenet weights carries an extra per-channel
Rescaling layer after its Normalization layer; the exporter folds that
factor into the exported variance (dividing by s^2 is exact), so the
Rust graph, which has no such layer, computes the same function.

Usage: export_weights.py --out DIR [--weights none|imagenet]
                         [--probe] [--randomize] [ID ...]
"""

import argparse
import hashlib
import os
import struct
import sys

import numpy as np

from kerasnames import canonical_names, weight_keys

ALL_IDS = [
    "vgg16",
    "vgg19",
    "resnet50",
    "resnet101",
    "inceptionresnetv2",
    "mobilenetv2",
    "inceptionv3",
    "xception",
    "efficientnetb0",
    "efficientnetb1",
    "efficientnetb2",
    "densenet121",
    "densenet169",
]


def constructor(keras, model_id):
    apps = keras.applications
    return {
        "vgg16": apps.VGG16,
        "vgg19": apps.VGG19,
        "resnet50": apps.ResNet50,
        "resnet101": apps.ResNet101,
        "inceptionresnetv2": apps.InceptionResNetV2,
        "mobilenetv2": apps.MobileNetV2,
        "inceptionv3": apps.InceptionV3,
        "xception": apps.Xception,
        "efficientnetb0": apps.EfficientNetB0,
        "efficientnetb1": apps.EfficientNetB1,
        "efficientnetb2": apps.EfficientNetB2,
        "densenet121": apps.DenseNet121,
        "densenet169": apps.DenseNet169,
    }[model_id]


def save_pxwt(path, entries):
    """entries: list of (name, float ndarray)."""
    digest = hashlib.sha256()
    with open(path, "wb") as f:

        def put(b):
            digest.update(b)
            f.write(b)

        put(b"PXWT0001")
        put(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode()
            # ascontiguousarray would promote 0-d arrays to 1-d.
            arr = np.asarray(arr, dtype="<f4", order="C")
            put(struct.pack("<H", len(raw)))
            put(raw)
            put(struct.pack("B", arr.ndim))
            for d in arr.shape:
                put(struct.pack("<I", d))
            put(arr.tobytes())
        f.write(digest.digest())


def randomize(model, rng):
    """Fill statistics and biases with seeded values; keep kernels at
    their own random initialization."""
    for layer in model.layers:
        cls = type(layer).__name__
        ws = layer.get_weights()
        if not ws:
            continue
        keys = weight_keys(cls, len(ws), layer.name)
        out = []
        for key, w in zip(keys, ws):
            if key == "gamma":
                out.append(rng.uniform(0.6, 1.4, w.shape).astype("f"))
            elif key == "beta":
                out.append(rng.normal(0.0, 0.2, w.shape).astype("f"))
            elif key == "moving_mean":
                out.append(rng.normal(0.0, 0.3, w.shape).astype("f"))
            elif key == "moving_variance":
                out.append(rng.uniform(0.5, 1.5, w.shape).astype("f"))
            elif key == "mean":
                out.append(rng.uniform(100.0, 150.0, w.shape).astype("f"))
            elif key == "variance":
                out.append(rng.uniform(3000.0, 5000.0, w.shape).astype("f"))
            elif key == "count":
                out.append(np.asarray(1000, dtype=w.dtype))
            elif key == "bias":
                out.append(rng.normal(0.0, 0.05, w.shape).astype("f"))
            else:
                out.append(w)
        layer.set_weights(out)
        if cls == "Normalization":
            layer.finalize_state()


def export(model_id, out_dir, weights, probe, rand):
    os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
    from tensorflow import keras

    model = constructor(keras, model_id)(
        include_top=False, weights=weights, input_shape=(150, 150, 3)
    )
    if rand:
        seed = int(hashlib.sha256(model_id.encode()).hexdigest()[:8], 16)
        randomize(model, np.random.RandomState(seed))

    renamed = canonical_names([(l.name, type(l).__name__) for l in model.layers])
    entries = []
    fold = None
    for layer in model.layers:
        cls = type(layer).__name__
        ws = layer.get_weights()
        if cls == "Rescaling" and np.ndim(layer.scale) > 0:
            # The imagenet EfficientNet variant scales each channel by s
            # after normalizing; (x-m)/sqrt(v) * s == (x-m)/sqrt(v/s^2).
            fold = np.asarray(layer.scale, dtype="f").reshape(-1)
            continue
        if not ws:
            continue
        keys = weight_keys(cls, len(ws), layer.name)
        if cls == "BatchNormalization":
            got = [w.name for w in layer.weights]
            assert got == keys, f"{layer.name}: weight order {got}"
        for key, w in zip(keys, ws):
            entries.append((f"{renamed[layer.name]}/{key}", w))
    if fold is not None:
        for i, (name, w) in enumerate(entries):
            if name.endswith("/variance"):
                entries[i] = (name, w / (fold * fold))

    if probe:
        rng = np.random.RandomState(1234)
        batch = rng.uniform(0.0, 255.0, (2, 150, 150, 3)).astype("f")
        feature = np.asarray(model(batch, training=False))
        entries.append(("__probe_input__", batch.transpose(0, 3, 1, 2)))
        entries.append(("__probe_feature__", feature.transpose(0, 3, 1, 2)))
        if fold is not None:
            raise SystemExit("probe with folding untested; probe without imagenet")

    path = os.path.join(out_dir, f"{model_id}.pxwt")
    save_pxwt(path, entries)
    mb = os.path.getsize(path) / 1e6
    print(f"{model_id}: {len(entries)} entries, {mb:.1f} MB -> {path}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--weights", default="none", choices=["none", "imagenet"])
    ap.add_argument("--probe", action="store_true")
    ap.add_argument("--randomize", action="store_true")
    ap.add_argument("ids", nargs="*", default=None)
    args = ap.parse_args()
    ids = args.ids or ALL_IDS
    unknown = [i for i in ids if i not in ALL_IDS]
    if unknown:
        raise SystemExit(f"unknown ids: {unknown}")
    os.makedirs(args.out, exist_ok=True)
    weights = None if args.weights == "none" else args.weights
    for model_id in ids:
        export(model_id, args.out, weights, args.probe, args.randomize)


if __name__ == "__main__":
    main()
