"""Layer specifications, the forward pass with attention hooks, and weight files.

A network is an ordered list of :class:`LayerSpec` entries applied to a
``[C, H, W]`` image. ReLU layers are numbered 1..R in order; those numbers are
how attention targets a layer. The tensor fed to the final fully connected
layer is the feature vector handed to the binary detectors.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

KINDS = ("conv", "relu", "maxpool", "fc", "softmax")

MAGIC = b"FBANETWT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0  # conv
    kernel: int = 0  # conv
    stride: int = 1  # conv, maxpool
    pad: int = 0  # conv
    size: int = 0  # maxpool window
    out_features: int = 0  # fc
    relu_index: int | None = None

    def to_dict(self) -> dict:
        keep = {
            "conv": ("out_channels", "kernel", "stride", "pad"),
            "maxpool": ("size", "stride"),
            "fc": ("out_features",),
            "relu": ("relu_index",),
            "softmax": (),
        }[self.kind]
        d = asdict(self)
        return {"kind": self.kind, **{k: d[k] for k in keep}}


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", _chain_shapes(self.input_shape, self.layers))

    @property
    def relu_positions(self) -> dict[int, int]:
        """Map relu_index -> position in :attr:`layers`."""
        return {l.relu_index: i for i, l in enumerate(self.layers) if l.kind == "relu"}

    @property
    def num_relu(self) -> int:
        return len(self.relu_positions)

    def relu_shape(self, relu_index: int) -> tuple[int, ...]:
        return self.shapes[self.relu_positions[relu_index] + 1]

    def relu_channels(self, relu_index: int) -> int:
        return self.relu_shape(relu_index)[0]

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.shapes[self._classifier_position()]))

    def _classifier_position(self) -> int:
        fcs = [i for i, l in enumerate(self.layers) if l.kind == "fc"]
        if not fcs:
            raise ValueError("network has no fully connected layer")
        return fcs[-1]

    def param_shapes(self) -> dict[int, tuple[tuple[int, ...], tuple[int, ...]]]:
        out = {}
        for i, layer in enumerate(self.layers):
            shape_in = self.shapes[i]
            if layer.kind == "conv":
                out[i] = ((layer.out_channels, shape_in[0], layer.kernel, layer.kernel), (layer.out_channels,))
            elif layer.kind == "fc":
                out[i] = ((layer.out_features, int(np.prod(shape_in))), (layer.out_features,))
        return out

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**l) for l in d["layers"]))


def _chain_shapes(input_shape, layers) -> tuple[tuple[int, ...], ...]:
    shapes = [tuple(input_shape)]
    next_relu = 1
    for pos, layer in enumerate(layers):
        cur = shapes[-1]
        where = f"layer {pos} ({layer.kind})"
        if layer.kind not in KINDS:
            raise ValueError(f"{where}: unknown layer kind")
        if layer.kind == "conv":
            if len(cur) != 3:
                raise ValueError(f"{where}: expects a [C,H,W] input, got {cur}")
            c, h, w = cur
            k, s, p = layer.kernel, layer.stride, layer.pad
            if layer.out_channels < 1 or k < 1 or s < 1 or p < 0 or k > h + 2 * p or k > w + 2 * p:
                raise ValueError(f"{where}: invalid hyperparameters for input {cur}")
            shapes.append((layer.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1))
        elif layer.kind == "maxpool":
            if len(cur) != 3 or layer.size < 1 or layer.stride < 1 or layer.size > min(cur[1:]):
                raise ValueError(f"{where}: invalid pooling for input {cur}")
            c, h, w = cur
            shapes.append((c, (h - layer.size) // layer.stride + 1, (w - layer.size) // layer.stride + 1))
        elif layer.kind == "fc":
            if layer.out_features < 1:
                raise ValueError(f"{where}: out_features must be positive")
            shapes.append((layer.out_features,))
        elif layer.kind == "relu":
            if layer.relu_index != next_relu:
                raise ValueError(f"{where}: relu_index must be {next_relu}, got {layer.relu_index}")
            next_relu += 1
            shapes.append(cur)
        else:  # softmax
            if len(cur) != 1:
                raise ValueError(f"{where}: softmax needs a vector input, got {cur}")
            if pos != len(layers) - 1:
                raise ValueError(f"{where}: softmax must be the last layer")
            shapes.append(cur)
    return tuple(shapes)


def make_spec(input_shape, layers) -> NetworkSpec:
    """Build a spec from ``(kind, params)`` pairs, numbering ReLU layers automatically."""
    out = []
    n = 0
    for kind, params in layers:
        params = dict(params)
        if kind == "relu":
            n += 1
            params["relu_index"] = n
        out.append(LayerSpec(kind, **params))
    return NetworkSpec(tuple(input_shape), tuple(out))


def desk_backbone(num_classes: int, input_shape=(3, 32, 32), width: int = 16, final_pool: int = 8) -> NetworkSpec:
    """Six-ReLU backbone for 32x32 inputs: four conv layers in three pooled blocks, two hidden fc.

    The last block max-pools over ``final_pool`` cells; the default 8 pools the
    whole 8x8 map, so the fc head sees where features occur only weakly.
    """
    w = width
    return make_spec(
        input_shape,
        [
            ("conv", dict(out_channels=w, kernel=3, pad=1)),
            ("relu", {}),
            ("maxpool", dict(size=2, stride=2)),
            ("conv", dict(out_channels=2 * w, kernel=3, pad=1)),
            ("relu", {}),
            ("maxpool", dict(size=2, stride=2)),
            ("conv", dict(out_channels=4 * w, kernel=3, pad=1)),
            ("relu", {}),
            ("conv", dict(out_channels=4 * w, kernel=3, pad=1)),
            ("relu", {}),
            ("maxpool", dict(size=final_pool, stride=final_pool)),
            ("fc", dict(out_features=8 * w)),
            ("relu", {}),
            ("fc", dict(out_features=4 * w)),
            ("relu", {}),
            ("fc", dict(out_features=num_classes)),
            ("softmax", {}),
        ],
    )


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[int, tuple[np.ndarray, np.ndarray]]  # layer position -> (kernel/weight, bias)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(self.params) != set(expected):
            raise ValueError(f"parameters given for layers {sorted(self.params)}, spec needs {sorted(expected)}")
        for pos, (ks, bs) in expected.items():
            k, b = self.params[pos]
            if k.shape != ks or b.shape != bs:
                raise ValueError(
                    f"layer {pos}: parameter shapes {k.shape}/{b.shape} do not match spec {ks}/{bs}"
                )


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for pos, (ks, bs) in spec.param_shapes().items():
        fan_in = int(np.prod(ks[1:]))
        k = rng.standard_normal(ks) * np.sqrt(2.0 / fan_in)
        params[pos] = (k.astype(T.DTYPE), np.zeros(bs, dtype=T.DTYPE))
    return Network(spec, params)


# -- forward pass -----------------------------------------------------------

@dataclass
class ForwardTrace:
    """Activations recorded during one forward pass over a batch.

    ``pre_relu[l]`` is the tensor entering ReLU layer ``l`` (after any additive
    bias), ``relu[l]`` its output after modulation. Arrays carry a leading
    batch axis.
    """

    pre_relu: dict[int, np.ndarray]
    relu: dict[int, np.ndarray]
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray | None

    def sample(self, n: int) -> "ForwardTrace":
        return ForwardTrace(
            {k: v[n] for k, v in self.pre_relu.items()},
            {k: v[n] for k, v in self.relu.items()},
            self.features[n],
            self.logits[n],
            None if self.probs is None else self.probs[n],
        )


def forward(net: Network, images, attention=None, resume: ForwardTrace | None = None, keep=None) -> ForwardTrace:
    """Run ``images`` (``[N, C, H, W]``) through the network.

    ``attention`` is any object with a ``layers`` set of relu indices and an
    ``apply(relu_index, pre)`` method returning ``(pre_relu, post_relu)``; see
    :class:`fbanet.attention.Attention`. It is validated before any compute.

    ``resume`` is an unmodulated trace of the same images that holds
    ``pre_relu`` for the first targeted layer; computation restarts there,
    which is exact because attention never touches earlier layers.

    ``keep`` limits which relu indices are recorded (default: all).
    """
    spec = net.spec
    x = np.asarray(images)
    if x.shape[1:] != spec.input_shape:
        raise T.ShapeError(f"image batch shape {x.shape[1:]} does not match network input {spec.input_shape}")
    targets = set()
    if attention is not None:
        targets = set(attention.layers)
        unknown = targets - set(spec.relu_positions)
        if unknown:
            raise ValueError(f"attention targets unknown relu layers {sorted(unknown)}")
        attention.validate(spec)
    keep = set(spec.relu_positions) if keep is None else set(keep)
    pre_relu: dict[int, np.ndarray] = {}
    relu_out: dict[int, np.ndarray] = {}
    start = 0
    if resume is not None and targets:
        first = min(targets)
        pos = spec.relu_positions[first]
        if first not in resume.pre_relu:
            raise ValueError(f"resume trace lacks pre-activation of relu layer {first}")
        x = resume.pre_relu[first]
        for l in resume.relu:
            if l < first and l in keep:
                pre_relu[l] = resume.pre_relu[l]
                relu_out[l] = resume.relu[l]
        start = pos
    features = None
    logits = None
    probs = None
    cls_pos = spec._classifier_position()
    for pos in range(start, len(spec.layers)):
        layer = spec.layers[pos]
        if pos == cls_pos:
            features = x.reshape(len(x), -1)
        if layer.kind == "conv":
            k, b = net.params[pos]
            x = T.conv2d_batch(x, k, b, layer.stride, layer.pad).astype(T.DTYPE)
        elif layer.kind == "maxpool":
            x = T.maxpool2d_batch(x, layer.size, layer.stride)
        elif layer.kind == "fc":
            k, b = net.params[pos]
            x = T.affine_batch(x.reshape(len(x), -1), k, b).astype(T.DTYPE)
            if pos == cls_pos:
                logits = x
        elif layer.kind == "relu":
            l = layer.relu_index
            if l in targets:
                pre, x = attention.apply(l, x)
            else:
                pre, x = x, T.relu(x)
            if l in keep:
                pre_relu[l] = pre
                relu_out[l] = x
        else:
            probs = T.softmax_batch(x).astype(T.DTYPE)
    return ForwardTrace(pre_relu, relu_out, features, logits, probs)


def forward_one(net: Network, image, attention=None) -> ForwardTrace:
    return forward(net, np.asarray(image)[None], attention).sample(0)


# -- weight files -----------------------------------------------------------

class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class HeaderError(WeightFileError):
    pass


class TruncatedPayloadError(WeightFileError):
    pass


def _tensor_table(spec: NetworkSpec):
    table = []
    offset = 0
    for pos, (ks, bs) in spec.param_shapes().items():
        for part, shape in (("kernel", ks), ("bias", bs)):
            nbytes = 4 * int(np.prod(shape))
            table.append({"name": f"layer{pos}.{part}", "layer": pos, "shape": list(shape), "offset": offset, "nbytes": nbytes})
            offset += nbytes
    return table, offset


def weights_bytes(net: Network, provenance: dict | None = None) -> bytes:
    """Serialize ``net`` to the on-disk weight format (see README for the layout).

    ``provenance`` is stored in the header for bookkeeping and ignored by the reader.
    """
    table, total = _tensor_table(net.spec)
    body = {"network": net.spec.to_dict(), "tensors": table, "payload_bytes": total}
    if provenance is not None:
        body["provenance"] = provenance
    header = json.dumps(
        body,
        sort_keys=True,
        indent=1,
    ).encode("utf-8") + b"\n"
    chunks = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    for entry in table:
        k, b = net.params[entry["layer"]]
        arr = k if entry["name"].endswith("kernel") else b
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_weights(net: Network, path, provenance: dict | None = None) -> None:
    Path(path).write_bytes(weights_bytes(net, provenance))


def weights_from_bytes(blob: bytes) -> Network:
    if len(blob) < _PREFIX.size or blob[:8] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, found {blob[:8]!r}")
    _, version, hlen = _PREFIX.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"version mismatch: file has format {version}, reader supports {FORMAT_VERSION}")
    raw = blob[_PREFIX.size:_PREFIX.size + hlen]
    if len(raw) < hlen:
        raise TruncatedPayloadError("truncated payload: file ends inside the header")
    try:
        header = json.loads(raw.decode("utf-8"))
        spec = NetworkSpec.from_dict(header["network"])
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderError(f"inconsistent header: {exc}") from exc
    table, total = _tensor_table(spec)
    if header.get("tensors") != table or header.get("payload_bytes") != total:
        raise HeaderError("inconsistent header: tensor table does not match the layer list")
    payload = memoryview(blob)[_PREFIX.size + hlen:]
    params: dict[int, list] = {}
    for entry in table:
        end = entry["offset"] + entry["nbytes"]
        if len(payload) < end:
            raise TruncatedPayloadError(
                f"truncated payload in tensor '{entry['name']}': needs bytes up to {end}, file has {len(payload)}"
            )
        arr = np.frombuffer(payload[entry["offset"]:end], dtype="<f4").astype(T.DTYPE).reshape(entry["shape"])
        params.setdefault(entry["layer"], []).append(arr)
    if len(payload) != total:
        raise HeaderError(f"inconsistent header: {len(payload) - total} trailing bytes after payload")
    return Network(spec, {pos: (k, b) for pos, (k, b) in params.items()})


def read_weights_header(path) -> dict:
    """Parsed JSON header of a weight file, without reading the payload into tensors."""
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size or prefix[:8] != MAGIC:
            raise BadMagicError(f"bad magic: expected {MAGIC!r}, found {prefix[:8]!r}")
        _, _, hlen = _PREFIX.unpack(prefix)
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_weights(path) -> Network:
    return weights_from_bytes(Path(path).read_bytes())


def network_hash(net: Network) -> str:
    """Hash of the architecture and parameters; header provenance does not enter it."""
    return hashlib.sha256(weights_bytes(net)).hexdigest()
