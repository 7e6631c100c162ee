"""Bundled architecture configs and their factory functions.

The compact chest-CT network is built from PRPE blocks: a pointwise
projection, channel replication, a depthwise 3x3 filter (stride 2 in the
PRPE-S variant), a second pointwise projection, and a pointwise expansion.
Batchnorm and relu sit between blocks. The full-size network runs at
512x512 grayscale; the mini variant is a 64x64 configuration for smoke
tests and synthetic-data experiments, and it feeds the classifier head from
the flattened feature map so spatial layout stays visible to it.
"""

import json
from importlib import resources

from .errors import ConfigError
from .graph import load_architecture, parse_architecture_config
from .resnet import resnet50_config


def _prpe_trunk(nodes, prev, stages, r):
    for si, (blocks, c_out, c_proj, downsample) in enumerate(stages, start=1):
        for bi in range(1, blocks + 1):
            base = f"s{si}b{bi}"
            op = "prpe_s" if (bi == 1 and downsample) else "prpe"
            nodes.append({"name": base, "op": op,
                          "attrs": {"c_proj": c_proj, "r": r, "c_out": c_out},
                          "inputs": [prev]})
            nodes.append({"name": f"{base}/bn", "op": "batchnorm", "attrs": {},
                          "inputs": [base]})
            nodes.append({"name": f"{base}/relu", "op": "relu", "attrs": {},
                          "inputs": [f"{base}/bn"]})
            prev = f"{base}/relu"
    return prev


def covidnet_ct_config(num_classes=3):
    """Config for the full-size compact network (512x512x1 input).

    Stage layout (blocks, channels, projection width): 4x96/24 at 128x128,
    5x192/48 at 64x64, 5x384/96 at 32x32, and 3x544/136 at 16x16, with
    replication factor 4 throughout. Totals 1.41M parameters and 4.21
    GFLOPs under the 2-FLOPs-per-MAC convention.
    """
    nodes = [
        {"name": "stem/conv", "op": "conv",
         "attrs": {"out_channels": 32, "kernel": 7, "stride": 2, "bias": True},
         "inputs": ["input"]},
        {"name": "stem/bn", "op": "batchnorm", "attrs": {},
         "inputs": ["stem/conv"]},
        {"name": "stem/relu", "op": "relu", "attrs": {}, "inputs": ["stem/bn"]},
        {"name": "stem/pool", "op": "max_pool",
         "attrs": {"kernel": 3, "stride": 2}, "inputs": ["stem/relu"]},
    ]
    prev = _prpe_trunk(nodes, "stem/pool", [
        (4, 96, 24, False),
        (5, 192, 48, True),
        (5, 384, 96, True),
        (3, 544, 136, True),
    ], r=4)
    nodes += [
        {"name": "pool", "op": "global_avg_pool", "attrs": {}, "inputs": [prev]},
        {"name": "head", "op": "softmax_head", "attrs": {"classes": num_classes},
         "inputs": ["pool"]},
    ]
    return {"input_shape": [512, 512, 1], "nodes": nodes, "output": "head"}


def covidnet_ct_mini_config(num_classes=3):
    """Config for the 64x64 miniature used in tests and small experiments."""
    nodes = [
        {"name": "stem/conv", "op": "conv",
         "attrs": {"out_channels": 8, "kernel": 5, "stride": 2, "bias": True},
         "inputs": ["input"]},
        {"name": "stem/bn", "op": "batchnorm", "attrs": {},
         "inputs": ["stem/conv"]},
        {"name": "stem/relu", "op": "relu", "attrs": {}, "inputs": ["stem/bn"]},
        {"name": "stem/pool", "op": "max_pool",
         "attrs": {"kernel": 3, "stride": 2}, "inputs": ["stem/relu"]},
    ]
    prev = _prpe_trunk(nodes, "stem/pool", [
        (1, 16, 4, False),   # 16x16
        (1, 32, 8, True),    # 8x8
    ], r=2)
    nodes.append({"name": "head", "op": "softmax_head",
                  "attrs": {"classes": num_classes}, "inputs": [prev]})
    return {"input_shape": [64, 64, 1], "nodes": nodes, "output": "head"}


BUNDLED_CONFIGS = {
    "covidnet-ct": covidnet_ct_config,
    "covidnet-ct-mini": covidnet_ct_mini_config,
    "resnet50": resnet50_config,
}


def list_architectures():
    return sorted(BUNDLED_CONFIGS)


def bundled_config_text(name):
    """The JSON text of a bundled config as shipped in the package."""
    ref = resources.files("cnct") / "configs" / f"{name}.json"
    return ref.read_text(encoding="utf-8")


def resolve_architecture(name_or_path):
    """Parse an architecture by bundled name, file path, or raw dict."""
    if isinstance(name_or_path, dict):
        return parse_architecture_config(name_or_path)
    name = str(name_or_path)
    if name in BUNDLED_CONFIGS:
        return parse_architecture_config(bundled_config_text(name))
    if name.endswith(".json"):
        try:
            return load_architecture(name)
        except FileNotFoundError:
            raise ConfigError(f"architecture config file not found: {name}")
    raise ConfigError(
        f"unknown architecture {name!r}: pass one of {list_architectures()} "
        f"or a path to a .json config")


def build_covidnet_ct(num_classes=3):
    return parse_architecture_config(covidnet_ct_config(num_classes))


def build_covidnet_ct_mini(num_classes=3):
    return parse_architecture_config(covidnet_ct_mini_config(num_classes))


def write_bundled_configs(directory):
    """Regenerate the shipped JSON files from the factories."""
    import pathlib

    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, factory in BUNDLED_CONFIGS.items():
        path = directory / f"{name}.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(factory(), f, indent=1)
            f.write("\n")
    return sorted(p.name for p in directory.glob("*.json"))
