"""Shared name mapping between Keras layers and the Rust graph.

Keras numbers unnamed layers with session-global counters, so the same
architecture gets different layer names depending on how many models were
built earlier in the process. `canonical_names` renumbers a model's
auto-named layers back to their fresh-session form ("conv2d",
"conv2d_1", ...). `weight_keys` names each weight tensor of a layer the
way the Rust graph does, in get_weights() order.
"""

import re

# get_weights() order per layer class; trailing names are dropped when a
# layer carries fewer tensors (e.g. bias-free convolutions).
WEIGHT_NAMES = {
    "Conv2D": ["kernel", "bias"],
    "Dense": ["kernel", "bias"],
    "DepthwiseConv2D": ["depthwise_kernel", "bias"],
    "SeparableConv2D": ["depthwise_kernel", "pointwise_kernel", "bias"],
    "Normalization": ["mean", "variance", "count"],
}


def snake_case(cls):
    s = re.sub(r"(.)([A-Z][a-z0-9]+)", r"\1_\2", cls)
    return re.sub(r"([a-z])([A-Z])", r"\1_\2", s).lower()


def auto_parts(name, cls):
    """(base, index) when `name` is an auto-generated name for `cls`."""
    base = snake_case(cls)
    if name == base:
        return base, 0
    prefix = base + "_"
    if name.startswith(prefix) and name[len(prefix):].isdigit():
        return base, int(name[len(prefix):])
    return None


def canonical_names(named):
    """Map layer names to fresh-session names.

    `named` is a list of (name, class_name) pairs covering one model.
    """
    mins = {}
    for name, cls in named:
        parts = auto_parts(name, cls)
        if parts:
            base, idx = parts
            mins[base] = min(mins.get(base, idx), idx)
    renamed = {}
    for name, cls in named:
        parts = auto_parts(name, cls)
        if parts:
            base, idx = parts
            k = idx - mins[base]
            renamed[name] = base if k == 0 else f"{base}_{k}"
        else:
            renamed[name] = name
    return renamed


def weight_keys(cls, n, where):
    """Weight tensor names for a layer class with `n` tensors."""
    if cls == "BatchNormalization":
        if n == 4:
            return ["gamma", "beta", "moving_mean", "moving_variance"]
        if n == 3:
            return ["beta", "moving_mean", "moving_variance"]
        raise SystemExit(f"{where}: unexpected batch norm weight count {n}")
    names = WEIGHT_NAMES.get(cls)
    if names is None or n > len(names):
        raise SystemExit(f"{where}: no weight-name rule for {cls} with {n} tensors")
    return names[:n]
