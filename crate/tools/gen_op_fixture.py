#!/usr/bin/env python3
"""Build a tiny reference model covering every graph op and export a
self-contained parity fixture (weights + probe input + probe output).

The layer names are explicit and match the Rust test graph one for one,
so no auto-name canonicalization is involved.

Usage: gen_op_fixture.py OUT_PXWT
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
from export_weights import save_pxwt
from kerasnames import weight_keys


def build(keras):
    L = keras.layers
    inp = L.Input((16, 16, 3), name="in")
    x = L.Rescaling(scale=1 / 127.5, offset=-1.0, name="pre_rescale")(inp)
    x = L.Normalization(axis=-1, name="pre_norm")(x)
    x = L.ZeroPadding2D(((0, 1), (0, 1)), name="stem_pad")(x)
    x = L.Conv2D(8, 3, strides=2, padding="valid", use_bias=True, name="stem_conv")(x)
    x = L.BatchNormalization(epsilon=1e-3, name="stem_bn")(x)
    x = L.ReLU(max_value=6.0, name="stem_relu6")(x)

    a = L.Conv2D(8, 1, padding="same", use_bias=False, name="a_pw")(x)
    a = L.BatchNormalization(epsilon=1e-3, scale=False, name="a_bn")(a)
    a = L.Activation("swish", name="a_swish")(a)
    a = L.DepthwiseConv2D(3, strides=1, padding="same", use_bias=False, name="a_dw")(a)
    a = L.BatchNormalization(epsilon=1e-3, name="a_dw_bn")(a)
    a = L.Activation("relu", name="a_relu")(a)

    se = L.GlobalAveragePooling2D(name="se_gap")(a)
    se = L.Reshape((1, 1, 8), name="se_reshape")(se)
    se = L.Conv2D(4, 1, use_bias=True, name="se_reduce")(se)
    se = L.Activation("swish", name="se_swish")(se)
    se = L.Conv2D(8, 1, use_bias=True, name="se_expand")(se)
    se = L.Activation("sigmoid", name="se_sigmoid")(se)
    a = L.Multiply(name="se_mul")([a, se])

    b = L.SeparableConv2D(8, 3, padding="same", use_bias=False, name="b_sep")(x)
    b = L.BatchNormalization(epsilon=1e-3, name="b_bn")(b)

    m = L.Add(name="merge_add")([a, b])
    c = L.Concatenate(name="merge_cat")([m, x])
    p = L.MaxPooling2D(pool_size=3, strides=2, padding="same", name="pool_max")(c)
    p = L.AveragePooling2D(pool_size=3, strides=1, padding="same", name="pool_avg")(p)
    g = L.GlobalAveragePooling2D(name="gap")(p)
    d = L.Dense(8, name="fc1")(g)
    d = L.Activation("relu", name="fc1_relu")(d)
    out = L.Dense(5, name="fc2")(d)
    out = L.Activation("softmax", name="probs")(out)
    return keras.Model(inp, out, name="op_fixture")


def randomize(model, rng):
    """Non-trivial values everywhere biases or statistics default to
    zeros or ones, so every code path is visible in the output."""
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


def main():
    if len(sys.argv) != 2:
        raise SystemExit(__doc__)
    os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
    from tensorflow import keras

    model = build(keras)
    randomize(model, np.random.RandomState(20240515))

    entries = []
    for layer in model.layers:
        cls = type(layer).__name__
        ws = layer.get_weights()
        if not ws:
            continue
        for key, w in zip(weight_keys(cls, len(ws), layer.name), ws):
            entries.append((f"{layer.name}/{key}", w))

    rng = np.random.RandomState(4321)
    batch = rng.uniform(0.0, 255.0, (2, 16, 16, 3)).astype("f")
    probs = np.asarray(model(batch, training=False))
    entries.append(("__probe_input__", batch.transpose(0, 3, 1, 2)))
    entries.append(("__probe_output__", probs))

    save_pxwt(sys.argv[1], entries)
    kb = os.path.getsize(sys.argv[1]) / 1e3
    print(f"{len(entries)} entries, {kb:.1f} KB -> {sys.argv[1]}")
    print("probe output:")
    print(probs)


if __name__ == "__main__":
    main()
