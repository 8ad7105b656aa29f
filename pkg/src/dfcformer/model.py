"""Dual-stream spatio-temporal transformer.

Each stream is one post-norm transformer layer followed by a strided valid
convolution with ReLU. The temporal stream reads windows as tokens, the
spatial stream reads ROIs as tokens. Stream outputs are stacked along the
token axis, pooled by a learned attention score, projected to a tanh
embedding, and mapped to one logit.

Variants
--------
``full``
    both streams.
``t_only`` / ``s_only``
    one stream, same fusion tail.
``os_fc``
    no transformer; a convolution over the rows of the static FC matrix
    feeds the same tail.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .dfc import FeatureMatrices
from .exceptions import ConfigError, ContractError, DataError, ShapeError
from .numerics import Tensor

VARIANTS = ("full", "s_only", "t_only", "os_fc")
_STREAM_KEYS = ("w_in", "w_q", "w_k", "w_v", "w_o", "w1", "b1", "w2", "b2",
                "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta", "conv_w", "conv_b")


def normalize_variant(name):
    v = str(name).replace("-", "_").lower()
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return v


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    heads: int = 4
    ffn_hidden: int = 64
    conv_kernel: int = 3
    conv_stride: int = 2
    conv_channels: int = 16
    embed_dim: int = 16
    variant: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        for name in ("d_model", "heads", "ffn_hidden", "conv_kernel", "conv_stride",
                     "conv_channels", "embed_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @property
    def d_k(self):
        return self.d_model // self.heads

    @property
    def streams(self):
        return {"full": ("temporal", "spatial"), "t_only": ("temporal",),
                "s_only": ("spatial",), "os_fc": ()}[self.variant]

    def check_tokens(self, n_windows, n_rois):
        """Reject inputs too short for the convolution of any active stream."""
        tokens = {"temporal": n_windows, "spatial": n_rois}
        if self.variant == "os_fc":
            tokens = {"static": n_rois}
        else:
            tokens = {s: tokens[s] for s in self.streams}
        for stream, count in tokens.items():
            if count < self.conv_kernel:
                raise ConfigError(
                    f"{stream} stream has {count} tokens, fewer than conv_kernel={self.conv_kernel}"
                )


class ModelParams:
    """Named parameter tensors plus the config and input sizes they were built for.

    Names are dotted, e.g. ``temporal.w_q`` or ``head.b``.
    """

    def __init__(self, config, feature_dims, tensors):
        self.config = config
        self.feature_dims = dict(feature_dims)
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def group(self, prefix):
        head = prefix + "."
        return {k[len(head):]: t for k, t in self.tensors.items() if k.startswith(head)}

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def n_scalars(self):
        return int(np.sum([t.values.size for t in self.tensors.values()]))

    def copy(self):
        tensors = {k: Tensor(t.values, requires_grad=True, name=k) for k, t in self.tensors.items()}
        return ModelParams(self.config, self.feature_dims, tensors)

    def flat(self):
        return np.concatenate([t.values.ravel() for t in self.tensors.values()])


def param_shapes(config, feature_dims):
    """Ordered ``name -> (rows, cols)`` for a variant; fixes init draw order."""
    d, f, c, k = config.d_model, config.ffn_hidden, config.conv_channels, config.conv_kernel
    shapes = {}
    for stream in config.streams:
        fdim = feature_dims[stream]
        shapes.update({
            f"{stream}.w_in": (fdim, d),
            f"{stream}.w_q": (d, d),
            f"{stream}.w_k": (d, d),
            f"{stream}.w_v": (d, d),
            f"{stream}.w_o": (d, d),
            f"{stream}.ln1_gamma": (1, d),
            f"{stream}.ln1_beta": (1, d),
            f"{stream}.w1": (d, f),
            f"{stream}.b1": (1, f),
            f"{stream}.w2": (f, d),
            f"{stream}.b2": (1, d),
            f"{stream}.ln2_gamma": (1, d),
            f"{stream}.ln2_beta": (1, d),
            f"{stream}.conv_w": (k * d, c),
            f"{stream}.conv_b": (1, c),
        })
    if config.variant == "os_fc":
        n = feature_dims["static"]
        shapes.update({"static.conv_w": (k * n, c), "static.conv_b": (1, c)})
    shapes.update({
        "fusion.w_att": (c, c),
        "fusion.w_score": (c, 1),
        "fusion.w_proj": (c, config.embed_dim),
        "fusion.b_proj": (1, config.embed_dim),
        "head.w": (config.embed_dim, 1),
        "head.b": (1, 1),
    })
    return shapes


def feature_dims_for(config, n_windows, n_rois):
    if config.variant == "os_fc":
        return {"static": n_rois}
    dims = {"temporal": n_rois, "spatial": n_windows}
    return {s: dims[s] for s in config.streams}


def init_params(seed, config, feature_dims):
    """Glorot-uniform weights, zero biases, unit LayerNorm gains.

    Weights are drawn from ``U(-a, a)`` with ``a = sqrt(6 / (rows + cols))``,
    in the fixed order of :func:`param_shapes`.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config, feature_dims).items():
        leaf = name.split(".")[1]
        if leaf.endswith("_gamma"):
            values = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_beta") or leaf == "conv_b":
            values = np.zeros(shape)
        else:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            values = rng.uniform(-a, a, size=shape)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    return ModelParams(config, feature_dims, tensors)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def attention_heads(x, p, heads):
    """Per-head attention weight matrices, each ``tokens x tokens``."""
    q = x @ p["w_q"]
    k = x @ p["w_k"]
    dk = q.shape[1] // heads
    scale = float(np.sqrt(dk))
    out = []
    for i in range(heads):
        cols = slice(i * dk, (i + 1) * dk)
        out.append(nx.softmax_rows(q[:, cols] @ k[:, cols].T, scale))
    return out


def mhsa_forward(x, p, heads):
    """Multi-head self-attention: heads attend on column slices of Q, K, V."""
    if x.shape[1] % heads:
        raise ShapeError(f"width {x.shape[1]} is not divisible by {heads} heads")
    v = x @ p["w_v"]
    dk = v.shape[1] // heads
    weights = attention_heads(x, p, heads)
    outs = [a @ v[:, i * dk:(i + 1) * dk] for i, a in enumerate(weights)]
    return nx.concat(outs, axis=1) @ p["w_o"]


def ffn_forward(x, p):
    return nx.relu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def transformer_layer(features, p, heads):
    if features.shape[1] != p["w_in"].shape[0]:
        raise ShapeError(
            f"features have width {features.shape[1]}, input projection expects {p['w_in'].shape[0]}"
        )
    x0 = features @ p["w_in"]
    x1 = nx.layer_norm(x0 + mhsa_forward(x0, p, heads), p["ln1_gamma"], p["ln1_beta"])
    return nx.layer_norm(x1 + ffn_forward(x1, p), p["ln2_gamma"], p["ln2_beta"])


def stream_forward(features, p, config):
    if features.shape[0] < config.conv_kernel:
        raise ShapeError(f"{features.shape[0]} tokens is fewer than conv_kernel={config.conv_kernel}")
    h = transformer_layer(features, p, config.heads)
    return nx.relu(nx.conv1d(h, p["conv_w"], p["conv_b"], config.conv_stride))


def attention_weights(h, p):
    """Pooling weights over tokens, as a ``1 x tokens`` row."""
    scores = nx.tanh(h @ p["w_att"]) @ p["w_score"]
    return nx.softmax_rows(scores.T)


def global_attention_pool(h, p):
    return attention_weights(h, p) @ h


def stream_outputs(inputs, params):
    """Token sequences that enter the pooling stage, one per active stream."""
    config = params.config
    if config.variant == "os_fc":
        if isinstance(inputs, FeatureMatrices):
            raise ContractError("os_fc takes the static FC matrix, not window features")
        fc = np.asarray(inputs, dtype=np.float64)
        if fc.ndim != 2 or fc.shape[0] != fc.shape[1]:
            raise ContractError(f"os_fc expects a square static FC matrix, got shape {fc.shape}")
        p = params.group("static")
        return [nx.relu(nx.conv1d(Tensor(fc), p["conv_w"], p["conv_b"], config.conv_stride))]
    if not isinstance(inputs, FeatureMatrices):
        raise ContractError(f"variant {config.variant} takes FeatureMatrices, got {type(inputs).__name__}")
    source = {"temporal": inputs.temporal, "spatial": inputs.spatial}
    return [stream_forward(Tensor(source[s]), params.group(s), config) for s in config.streams]


def model_forward(inputs, params):
    """Return ``(logit, embedding)`` as ``1x1`` and ``1 x embed_dim`` tensors."""
    streams = stream_outputs(inputs, params)
    tokens = streams[0] if len(streams) == 1 else nx.concat(streams, axis=0)
    fusion = params.group("fusion")
    pooled = global_attention_pool(tokens, fusion)
    embedding = nx.tanh(pooled @ fusion["w_proj"] + fusion["b_proj"])
    head = params.group("head")
    logit = embedding @ head["w"] + head["b"]
    return logit, embedding


def predict_logits(samples, params):
    """Logits for a list of :class:`~dfcformer.dfc.ScanFeatures` without recording a graph."""
    with nx.no_grad():
        return np.array([model_forward(s.model_input(params.config.variant), params)[0].item()
                         for s in samples])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

FORMAT = "dfcformer-params/1"


def _format_values(values):
    return "[" + ", ".join(format(float(v), ".17g") for v in values.ravel()) + "]"


def dumps_params(params):
    """Serialise to JSON text; values use 17 significant digits so they round-trip exactly."""
    head = json.dumps({"format": FORMAT, "config": asdict(params.config),
                       "feature_dims": params.feature_dims}, indent=1, sort_keys=True)
    lines = []
    for name, t in params.items():
        lines.append(f'  {json.dumps(name)}: {{"shape": [{t.shape[0]}, {t.shape[1]}], '
                     f'"values": {_format_values(t.values)}}}')
    return head[:-2] + ',\n "params": {\n' + ",\n".join(lines) + "\n }\n}\n"


def loads_params(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise DataError(f"parameter file is not valid JSON: {err}") from None
    if doc.get("format") != FORMAT:
        raise DataError(f"unsupported parameter file format {doc.get('format')!r}")
    config = ModelConfig(**doc["config"])
    feature_dims = {k: int(v) for k, v in doc["feature_dims"].items()}
    expected = param_shapes(config, feature_dims)
    if list(doc["params"]) != list(expected):
        raise DataError("parameter names do not match the stored configuration")
    tensors = {}
    for name, shape in expected.items():
        entry = doc["params"][name]
        if tuple(entry["shape"]) != shape or len(entry["values"]) != shape[0] * shape[1]:
            raise DataError(f"parameter {name}: stored shape {entry['shape']} does not match {shape}")
        values = np.array(entry["values"], dtype=np.float64).reshape(shape)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    return ModelParams(config, feature_dims, tensors)


def save_params(params, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_params(params))


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        return loads_params(fh.read())
