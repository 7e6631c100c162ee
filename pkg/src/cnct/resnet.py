"""Reference ResNet-50 baseline used for complexity comparisons.

Pre-activation bottleneck layout: each block is BN-ReLU-conv1x1,
BN-ReLU-conv3x3 (carrying the block stride), BN-ReLU-conv1x1, summed with an
identity shortcut, or a projection conv applied to the pre-activated tensor
whenever channels or resolution change. Block convolutions carry no bias;
normalization provides the shift.
"""

from .graph import parse_architecture_config

# (bottleneck width, output channels, blocks, first-block stride)
STAGES = (
    (64, 256, 3, 1),
    (128, 512, 4, 2),
    (256, 1024, 6, 2),
    (512, 2048, 3, 2),
)


def resnet50_config(num_classes=3, input_shape=(512, 512, 3)):
    """Architecture config dict for the ResNet-50 baseline."""
    nodes = [
        {"name": "stem/conv", "op": "conv",
         "attrs": {"out_channels": 64, "kernel": 7, "stride": 2, "bias": True},
         "inputs": ["input"]},
        {"name": "stem/pool", "op": "max_pool",
         "attrs": {"kernel": 3, "stride": 2}, "inputs": ["stem/conv"]},
    ]
    prev = "stem/pool"
    c_in = 64
    for si, (width, c_out, blocks, stride) in enumerate(STAGES, start=1):
        for bi in range(1, blocks + 1):
            base = f"s{si}b{bi}"
            s = stride if bi == 1 else 1
            project = (c_in != c_out) or (s != 1)
            nodes += [
                {"name": f"{base}/bn1", "op": "batchnorm", "attrs": {},
                 "inputs": [prev]},
                {"name": f"{base}/relu1", "op": "relu", "attrs": {},
                 "inputs": [f"{base}/bn1"]},
                {"name": f"{base}/conv1", "op": "conv",
                 "attrs": {"out_channels": width, "kernel": 1, "bias": False},
                 "inputs": [f"{base}/relu1"]},
                {"name": f"{base}/bn2", "op": "batchnorm", "attrs": {},
                 "inputs": [f"{base}/conv1"]},
                {"name": f"{base}/relu2", "op": "relu", "attrs": {},
                 "inputs": [f"{base}/bn2"]},
                {"name": f"{base}/conv2", "op": "conv",
                 "attrs": {"out_channels": width, "kernel": 3, "stride": s,
                           "bias": False},
                 "inputs": [f"{base}/relu2"]},
                {"name": f"{base}/bn3", "op": "batchnorm", "attrs": {},
                 "inputs": [f"{base}/conv2"]},
                {"name": f"{base}/relu3", "op": "relu", "attrs": {},
                 "inputs": [f"{base}/bn3"]},
                {"name": f"{base}/conv3", "op": "conv",
                 "attrs": {"out_channels": c_out, "kernel": 1, "bias": False},
                 "inputs": [f"{base}/relu3"]},
            ]
            if project:
                nodes.append(
                    {"name": f"{base}/proj", "op": "conv",
                     "attrs": {"out_channels": c_out, "kernel": 1, "stride": s,
                               "bias": False},
                     "inputs": [f"{base}/relu1"]})
                shortcut = f"{base}/proj"
            else:
                shortcut = prev
            nodes.append({"name": f"{base}/add", "op": "add", "attrs": {},
                          "inputs": [f"{base}/conv3", shortcut]})
            prev = f"{base}/add"
            c_in = c_out
    nodes += [
        {"name": "final/bn", "op": "batchnorm", "attrs": {}, "inputs": [prev]},
        {"name": "final/relu", "op": "relu", "attrs": {}, "inputs": ["final/bn"]},
        {"name": "final/pool", "op": "global_avg_pool", "attrs": {},
         "inputs": ["final/relu"]},
        {"name": "head", "op": "softmax_head", "attrs": {"classes": num_classes},
         "inputs": ["final/pool"]},
    ]
    return {"input_shape": list(input_shape), "nodes": nodes, "output": "head"}


def build_resnet50(num_classes=3, input_shape=(512, 512, 3)):
    """Parsed ResNet-50 graph ready for analysis or execution."""
    return parse_architecture_config(resnet50_config(num_classes, input_shape))
