"""Architecture graphs: config parsing, macro expansion, and execution.

A network is described by a JSON-friendly dict:

    {
      "input_shape": [H, W, C],
      "nodes": [{"name": ..., "op": ..., "attrs": {...}, "inputs": [...]}],
      "output": "<name of the final node>"
    }

Node inputs refer to previously declared nodes (or the reserved name
"input"), so a valid config is already in topological order. "inputs" may be
omitted to mean "the node declared just before this one". The macro ops
"prpe" and "prpe_s" expand into five primitives at parse time; everything
the executor runs is a primitive.
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import CheckpointCompatError, ConfigError, ShapeMismatchError

INPUT_NAME = "input"

PRIMITIVE_OPS = (
    "conv", "batchnorm", "relu", "max_pool", "global_avg_pool",
    "add", "concat", "replicate", "softmax_head",
)
MACRO_OPS = ("prpe", "prpe_s")


@dataclass
class NodeSpec:
    """One operation in an architecture graph."""

    name: str
    op: str
    attrs: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)


@dataclass
class ArchitectureGraph:
    """A parsed, validated, macro-expanded network description.

    nodes are primitives in topological order; shapes maps every node name
    (plus "input") to its per-sample output shape, (h, w, c) for image
    tensors or (c,) after pooling / the head.
    """

    input_shape: tuple
    nodes: list
    output: str
    shapes: dict

    @property
    def num_classes(self):
        return self.shapes[self.output][0]

    def node(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)


def _as_int(attrs, key, node, default=None, minimum=1):
    v = attrs.get(key, default)
    if v is None:
        raise ConfigError(f"node {node!r}: missing required attribute {key!r}")
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ConfigError(
            f"node {node!r}: attribute {key!r} must be an int >= {minimum}, got {v!r}")
    return v


def _as_pair(attrs, key, node, default):
    v = attrs.get(key, default)
    if isinstance(v, int):
        v = (v, v)
    try:
        v = tuple(int(e) for e in v)
    except (TypeError, ValueError):
        raise ConfigError(f"node {node!r}: attribute {key!r} must be an int or pair")
    if len(v) != 2 or any(e < 1 for e in v):
        raise ConfigError(f"node {node!r}: attribute {key!r} must be positive, got {v}")
    return v


def expand_prpe_block(node, c_in):
    """Expand a prpe / prpe_s macro node into its five primitives.

    The block projects c_in channels down to c_proj with a pointwise conv,
    replicates the projection r times, filters with a depthwise 3x3 conv
    (stride 2 for prpe_s, else 1), projects back down to c_proj, then
    expands pointwise to c_out.
    """
    name = node.name
    a = node.attrs
    c_proj = _as_int(a, "c_proj", name)
    r = _as_int(a, "r", name)
    c_out = _as_int(a, "c_out", name)
    bias = bool(a.get("bias", True))
    if "c_in" in a and a["c_in"] != c_in:
        raise ConfigError(
            f"node {name!r}: declared c_in={a['c_in']} but the incoming tensor "
            f"has {c_in} channels")
    if c_proj >= c_in:
        raise ConfigError(
            f"node {name!r}: c_proj={c_proj} must be smaller than the incoming "
            f"channel count {c_in}; the first stage is a reduction")
    stride = 2 if node.op == "prpe_s" else 1
    src = node.inputs[0]
    return [
        NodeSpec(f"{name}/proj1", "conv",
                 {"out_channels": c_proj, "kernel": 1, "bias": bias}, [src]),
        NodeSpec(f"{name}/rep", "replicate", {"r": r}, [f"{name}/proj1"]),
        NodeSpec(f"{name}/dw", "conv",
                 {"out_channels": r * c_proj, "kernel": 3, "stride": stride,
                  "groups": r * c_proj, "bias": bias}, [f"{name}/rep"]),
        NodeSpec(f"{name}/proj2", "conv",
                 {"out_channels": c_proj, "kernel": 1, "bias": bias},
                 [f"{name}/dw"]),
        NodeSpec(f"{name}/out", "conv",
                 {"out_channels": c_out, "kernel": 1, "bias": bias},
                 [f"{name}/proj2"]),
    ]


def conv_params_for(node, c_in):
    """Build ConvParams for a conv node given its incoming channel count."""
    a = node.attrs
    out = _as_int(a, "out_channels", node.name)
    kernel = _as_pair(a, "kernel", node.name, 3)
    stride = _as_pair(a, "stride", node.name, 1)
    groups = _as_int(a, "groups", node.name, default=1)
    padding = a.get("padding", "same")
    bias = bool(a.get("bias", True))
    try:
        return ops.ConvParams(c_in, out, kernel=kernel, stride=stride,
                              groups=groups, padding=padding, has_bias=bias)
    except ConfigError as e:
        raise ConfigError(f"node {node.name!r}: {e}") from None


def _infer_shape(node, in_shapes):
    """Output shape of one primitive given its input shapes."""
    name = node.name

    def image(shape, which):
        if len(shape) != 3:
            raise ShapeMismatchError(
                f"node {name!r}: input {which!r} must be an image tensor "
                f"(h, w, c), got shape {shape}")
        return shape

    if node.op == "conv":
        h, w, c = image(in_shapes[0], node.inputs[0])
        p = conv_params_for(node, c)
        oh, ow = ops.conv_output_hw(h, w, p)
        return (oh, ow, p.out_channels)
    if node.op == "batchnorm":
        return image(in_shapes[0], node.inputs[0])
    if node.op == "relu":
        return in_shapes[0]
    if node.op == "max_pool":
        h, w, c = image(in_shapes[0], node.inputs[0])
        kernel = _as_pair(node.attrs, "kernel", name, 3)
        stride = _as_pair(node.attrs, "stride", name, 2)
        padding = node.attrs.get("padding", "same")
        if padding == "same":
            return (-(-h // stride[0]), -(-w // stride[1]), c)
        if h < kernel[0] or w < kernel[1]:
            raise ShapeMismatchError(
                f"node {name!r}: pool kernel {kernel} does not fit input {(h, w)}")
        return ((h - kernel[0]) // stride[0] + 1,
                (w - kernel[1]) // stride[1] + 1, c)
    if node.op == "global_avg_pool":
        h, w, c = image(in_shapes[0], node.inputs[0])
        return (c,)
    if node.op == "add":
        first = in_shapes[0]
        for s, src in zip(in_shapes[1:], node.inputs[1:]):
            if s != first:
                raise ShapeMismatchError(
                    f"node {name!r}: add inputs disagree, {node.inputs[0]!r} has "
                    f"{first} but {src!r} has {s}")
        return first
    if node.op == "concat":
        hw = {image(s, src)[:2] for s, src in zip(in_shapes, node.inputs)}
        if len(hw) != 1:
            raise ShapeMismatchError(
                f"node {name!r}: concat inputs must share height and width, "
                f"got {sorted(hw)}")
        h, w = next(iter(hw))
        return (h, w, sum(s[2] for s in in_shapes))
    if node.op == "replicate":
        h, w, c = image(in_shapes[0], node.inputs[0])
        r = _as_int(node.attrs, "r", name)
        return (h, w, c * r)
    if node.op == "softmax_head":
        k = _as_int(node.attrs, "classes", name, default=3)
        return (k,)
    raise ConfigError(f"node {name!r}: unknown op {node.op!r}")


def _arity(node):
    return (2, None) if node.op in ("add", "concat") else (1, 1)


def parse_architecture_config(config):
    """Validate a config (dict or JSON text) into an ArchitectureGraph.

    Raises ConfigError / ShapeMismatchError naming the offending node for
    unknown ops, duplicate or reserved names, references to undeclared
    nodes, bad attributes, or inconsistent shapes.
    """
    if isinstance(config, (str, bytes)):
        try:
            config = json.loads(config)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(config, dict):
        raise ConfigError(f"config must be a mapping, got {type(config).__name__}")
    for key in ("input_shape", "nodes", "output"):
        if key not in config:
            raise ConfigError(f"config is missing required key {key!r}")

    try:
        input_shape = tuple(int(v) for v in config["input_shape"])
    except (TypeError, ValueError):
        raise ConfigError("input_shape must be [height, width, channels]")
    if len(input_shape) != 3 or any(v < 1 for v in input_shape):
        raise ConfigError(f"input_shape must be three positive ints, got "
                          f"{config['input_shape']}")

    raw = []
    prev = INPUT_NAME
    for i, entry in enumerate(config["nodes"]):
        if not isinstance(entry, dict) or "name" not in entry or "op" not in entry:
            raise ConfigError(f"nodes[{i}] must be a mapping with 'name' and 'op'")
        name = entry["name"]
        if not isinstance(name, str) or not name:
            raise ConfigError(f"nodes[{i}]: name must be a non-empty string")
        if name == INPUT_NAME:
            raise ConfigError(f"nodes[{i}]: {INPUT_NAME!r} is reserved for the "
                              f"network input")
        inputs = entry.get("inputs", [prev])
        if isinstance(inputs, str):
            inputs = [inputs]
        node = NodeSpec(name, entry["op"], dict(entry.get("attrs", {})),
                        list(inputs))
        raw.append(node)
        prev = name

    expanded = []
    shapes = {INPUT_NAME: input_shape}
    heads = []
    alias = {}  # macro name -> name of its final primitive

    def resolve(src, consumer):
        src = alias.get(src, src)
        if src not in shapes:
            raise ConfigError(
                f"node {consumer!r}: input {src!r} is not declared earlier in "
                f"the config (inputs must reference previous nodes)")
        return src

    for node in raw:
        if node.name in shapes or node.name in alias:
            raise ConfigError(f"duplicate node name {node.name!r}")
        lo, hi = _arity(node)
        if len(node.inputs) < lo or (hi is not None and len(node.inputs) > hi):
            raise ConfigError(
                f"node {node.name!r}: op {node.op!r} takes "
                f"{'at least ' + str(lo) if hi is None else str(hi)} input(s), "
                f"got {len(node.inputs)}")
        node.inputs = [resolve(s, node.name) for s in node.inputs]

        if node.op in MACRO_OPS:
            c_in = shapes[node.inputs[0]]
            if len(c_in) != 3:
                raise ShapeMismatchError(
                    f"node {node.name!r}: {node.op} needs an image input, got "
                    f"shape {c_in}")
            parts = expand_prpe_block(node, c_in[2])
            for part in parts:
                shapes[part.name] = _infer_shape(
                    part, [shapes[s] for s in part.inputs])
                expanded.append(part)
            alias[node.name] = parts[-1].name
        elif node.op in PRIMITIVE_OPS:
            shapes[node.name] = _infer_shape(
                node, [shapes[s] for s in node.inputs])
            expanded.append(node)
            if node.op == "softmax_head":
                heads.append(node.name)
        else:
            raise ConfigError(f"node {node.name!r}: unknown op {node.op!r}")

    output = alias.get(config["output"], config["output"])
    if output not in shapes or output == INPUT_NAME:
        raise ConfigError(f"output {config['output']!r} does not name a declared node")
    if len(heads) != 1:
        raise ConfigError(
            f"config must contain exactly one softmax_head node, found {len(heads)}")
    if output != heads[0]:
        raise ConfigError(
            f"output must be the softmax_head node {heads[0]!r}, got {output!r}")

    return ArchitectureGraph(input_shape=input_shape, nodes=expanded,
                             output=output, shapes=shapes)


def load_architecture(path):
    """Read and parse a config file from disk."""
    with open(path, "r", encoding="utf-8") as f:
        return parse_architecture_config(f.read())


def reshape_input(graph, height, width):
    """Re-infer shapes for a different input resolution.

    Channel structure is untouched, so macro expansion stays valid; only
    spatial sizes change. Returns a new ArchitectureGraph sharing node specs.
    """
    shapes = {INPUT_NAME: (int(height), int(width), graph.input_shape[2])}
    for node in graph.nodes:
        shapes[node.name] = _infer_shape(node, [shapes[s] for s in node.inputs])
    return ArchitectureGraph(input_shape=shapes[INPUT_NAME], nodes=graph.nodes,
                             output=graph.output, shapes=shapes)


# ---------------------------------------------------------------------------
# parameters


def _head_in_features(graph, node):
    shape = graph.shapes[node.inputs[0]]
    return int(np.prod(shape))


def init_weights(graph, seed=0, dtype=np.float32):
    """He-initialized parameter store: {node: {param: array}}.

    Conv and dense kernels draw from N(0, 2 / fan_in); biases and batchnorm
    shifts start at zero, batchnorm scales and running variances at one.
    Deterministic for a given (graph, seed, dtype).
    """
    rng = np.random.default_rng(seed)
    store = {}
    for node in graph.nodes:
        if node.op == "conv":
            c_in = graph.shapes[node.inputs[0]][2]
            p = conv_params_for(node, c_in)
            kh, kw, cpg, _ = p.weight_shape
            std = np.sqrt(2.0 / (kh * kw * cpg))
            entry = {"kernel": (rng.standard_normal(p.weight_shape) * std
                                ).astype(dtype)}
            if p.has_bias:
                entry["bias"] = np.zeros(p.out_channels, dtype)
            store[node.name] = entry
        elif node.op == "batchnorm":
            c = graph.shapes[node.name][2]
            store[node.name] = {
                "gamma": np.ones(c, dtype),
                "beta": np.zeros(c, dtype),
                "running_mean": np.zeros(c, dtype),
                "running_var": np.ones(c, dtype),
            }
        elif node.op == "softmax_head":
            d = _head_in_features(graph, node)
            k = graph.shapes[node.name][0]
            std = np.sqrt(2.0 / d)
            store[node.name] = {
                "weights": (rng.standard_normal((d, k)) * std).astype(dtype),
                "bias": np.zeros(k, dtype),
            }
    return store


TRAINABLE = {
    "conv": ("kernel", "bias"),
    "batchnorm": ("gamma", "beta"),
    "softmax_head": ("weights", "bias"),
}

STATE_ONLY = {"batchnorm": ("running_mean", "running_var")}


def parameter_names(graph):
    """Ordered (node, param) pairs a weight store must contain."""
    names = []
    for node in graph.nodes:
        if node.op == "conv":
            names.append((node.name, "kernel"))
            if node.attrs.get("bias", True):
                names.append((node.name, "bias"))
        elif node.op == "batchnorm":
            for p in ("gamma", "beta", "running_mean", "running_var"):
                names.append((node.name, p))
        elif node.op == "softmax_head":
            names.append((node.name, "weights"))
            names.append((node.name, "bias"))
    return names


def check_weights(graph, weights):
    """Raise CheckpointCompatError if the store does not fit the graph."""
    for node, param in parameter_names(graph):
        if node not in weights or param not in weights[node]:
            raise CheckpointCompatError(
                f"weights are missing {node}/{param} required by the architecture")


def copy_weights(weights):
    return {n: {p: a.copy() for p, a in entry.items()}
            for n, entry in weights.items()}


# ---------------------------------------------------------------------------
# execution


@dataclass
class ForwardResult:
    """Outputs of one forward pass."""

    logits: np.ndarray
    probs: np.ndarray
    cache: dict = None


def graph_forward(graph, weights, x, mode="infer", update_stats=True):
    """Run the network on a batch.

    Args:
        graph: parsed ArchitectureGraph.
        weights: parameter store from init_weights or a loaded checkpoint.
        x: (n, h, w, c) batch matching graph.input_shape.
        mode: "train" uses batch statistics in batchnorm (and, when
            update_stats is set, advances running statistics in place) and
            records an activation cache for graph_backward; "infer" uses
            stored running statistics and returns no cache.

    Returns:
        ForwardResult with (n, k) logits and probabilities.
    """
    ops._check_nhwc(x, "network input")
    if tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeMismatchError(
            f"input batch has per-sample shape {tuple(x.shape[1:])}, the "
            f"architecture expects {graph.input_shape}")
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    check_weights(graph, weights)

    train = mode == "train"
    values = {INPUT_NAME: x}
    bn_caches = {}
    head_flat = None
    logits = None

    for node in graph.nodes:
        ins = [values[s] for s in node.inputs]
        if node.op == "conv":
            p = conv_params_for(node, ins[0].shape[3])
            w = weights[node.name]
            out = ops.conv2d(ins[0], p, w["kernel"], w.get("bias"))
        elif node.op == "batchnorm":
            w = weights[node.name]
            eps = float(node.attrs.get("epsilon", 1e-5))
            if train:
                out, cache, mean, var = ops.batchnorm_train(
                    ins[0], w["gamma"], w["beta"], eps)
                bn_caches[node.name] = cache
                if update_stats:
                    m = float(node.attrs.get("momentum", 0.1))
                    w["running_mean"] = ((1 - m) * w["running_mean"] + m * mean
                                         ).astype(w["running_mean"].dtype)
                    w["running_var"] = ((1 - m) * w["running_var"] + m * var
                                        ).astype(w["running_var"].dtype)
            else:
                out = ops.batchnorm_infer(ins[0], w["gamma"], w["beta"],
                                          w["running_mean"], w["running_var"], eps)
        elif node.op == "relu":
            out = ops.relu(ins[0])
        elif node.op == "max_pool":
            out = ops.max_pool(ins[0],
                               kernel=_as_pair(node.attrs, "kernel", node.name, 3),
                               stride=_as_pair(node.attrs, "stride", node.name, 2),
                               padding=node.attrs.get("padding", "same"))
        elif node.op == "global_avg_pool":
            out = ops.global_avg_pool(ins[0])
        elif node.op == "add":
            out = ins[0]
            for other in ins[1:]:
                out = ops.add(out, other)
        elif node.op == "concat":
            out = ops.concat_channels(ins)
        elif node.op == "replicate":
            out = ops.replicate_channels(ins[0], node.attrs["r"])
        elif node.op == "softmax_head":
            flat = ins[0].reshape(ins[0].shape[0], -1)
            head_flat = flat
            w = weights[node.name]
            logits = ops.dense(flat, w["weights"], w["bias"])
            out = logits
        else:  # pragma: no cover - parse_architecture_config rejects these
            raise ConfigError(f"node {node.name!r}: unknown op {node.op!r}")
        values[node.name] = out

    probs = ops.softmax(logits)
    cache = None
    if train:
        cache = {"values": values, "bn": bn_caches, "head_flat": head_flat,
                 "probs": probs}
    return ForwardResult(logits=logits, probs=probs, cache=cache)


def graph_backward(graph, weights, cache, labels):
    """Gradients of the mean cross-entropy loss for a cached train forward.

    Returns {node: {param: grad}} covering every trainable parameter.
    """
    if cache is None:
        raise ConfigError("graph_backward needs the cache from a mode='train' "
                          "forward pass")
    values = cache["values"]
    grads = {}
    dys = {graph.output: ops.softmax_xent_backward(cache["probs"],
                                                   np.asarray(labels))}

    def pull(name, like):
        d = dys.pop(name, None)
        return np.zeros_like(like) if d is None else d

    def push(name, d):
        if name == INPUT_NAME:
            return
        if name in dys:
            dys[name] = dys[name] + d
        else:
            dys[name] = d

    for node in reversed(graph.nodes):
        dy = pull(node.name, values[node.name])
        ins = [values[s] for s in node.inputs]
        if node.op == "conv":
            p = conv_params_for(node, ins[0].shape[3])
            dx, dw, db = ops.conv2d_backward(ins[0], p,
                                             weights[node.name]["kernel"], dy)
            grads[node.name] = {"kernel": dw}
            if db is not None:
                grads[node.name]["bias"] = db
            push(node.inputs[0], dx)
        elif node.op == "batchnorm":
            dx, dg, db = ops.batchnorm_backward(dy, cache["bn"][node.name])
            grads[node.name] = {"gamma": dg, "beta": db}
            push(node.inputs[0], dx)
        elif node.op == "relu":
            push(node.inputs[0], ops.relu_backward(dy, ins[0]))
        elif node.op == "max_pool":
            push(node.inputs[0], ops.max_pool_backward(
                dy, ins[0],
                kernel=_as_pair(node.attrs, "kernel", node.name, 3),
                stride=_as_pair(node.attrs, "stride", node.name, 2),
                padding=node.attrs.get("padding", "same")))
        elif node.op == "global_avg_pool":
            push(node.inputs[0], ops.global_avg_pool_backward(dy, ins[0].shape))
        elif node.op == "add":
            for src in node.inputs:
                push(src, dy)
        elif node.op == "concat":
            parts = ops.split_channels(dy, [t.shape[3] for t in ins])
            for src, part in zip(node.inputs, parts):
                push(src, part)
        elif node.op == "replicate":
            push(node.inputs[0], ops.replicate_channels_backward(
                dy, node.attrs["r"]))
        elif node.op == "softmax_head":
            flat = cache["head_flat"]
            dx, dw, db = ops.dense_backward(dy, flat,
                                            weights[node.name]["weights"])
            grads[node.name] = {"weights": dw, "bias": db}
            push(node.inputs[0], dx.reshape(ins[0].shape))
    return grads


def predict_probs(graph, weights, x, batch_size=32):
    """Inference-mode class probabilities, batched to bound memory."""
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        res = graph_forward(graph, weights, x[start:start + batch_size],
                            mode="infer")
        chunks.append(res.probs)
    return np.concatenate(chunks, axis=0)


def architecture_to_config(graph):
    """Serialize back to the JSON schema (primitives only)."""
    return {
        "input_shape": list(graph.input_shape),
        "nodes": [
            {"name": n.name, "op": n.op, "attrs": copy.deepcopy(n.attrs),
             "inputs": list(n.inputs)}
            for n in graph.nodes
        ],
        "output": graph.output,
    }
