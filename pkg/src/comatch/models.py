"""Network builders (MLP, 7-layer CNN), inference and checkpoint files."""
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad
from .errors import DimensionError, FormatError, DataIOError, ValidationError
from .ndgrad import Tensor


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | relu | conv | bn | maxpool | flatten
    name: str = ""
    size: tuple = ()


@dataclass
class Network:
    layers: list
    params: dict
    buffers: dict = field(default_factory=dict)
    input_shape: tuple = ()
    mode: str = "train"

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def forward(self, x, train=None, update_stats=True):
        """Logits for a batch. ``train`` overrides ``self.mode`` when given."""
        if train is None:
            train = self.mode == "train"
        x = x if isinstance(x, Tensor) else Tensor(x)
        if self.input_shape and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise DimensionError(f"network expects inputs of shape [N, {', '.join(map(str, self.input_shape))}], "
                                 f"got {list(x.shape)}")
        h = x
        for layer in self.layers:
            p = self.params
            if layer.kind == "flatten":
                h = ndgrad.flatten(h)
            elif layer.kind == "dense":
                h = ndgrad.affine(h, p[layer.name + ".weight"], p[layer.name + ".bias"])
            elif layer.kind == "conv":
                h = ndgrad.conv2d(h, p[layer.name + ".weight"], p[layer.name + ".bias"])
            elif layer.kind == "bn":
                h = ndgrad.batchnorm2d(
                    h, p[layer.name + ".weight"], p[layer.name + ".bias"],
                    self.buffers[layer.name + ".running_mean"], self.buffers[layer.name + ".running_var"],
                    train=train, update_stats=update_stats,
                )
            elif layer.kind == "relu":
                h = ndgrad.relu(h)
            elif layer.kind == "maxpool":
                h = ndgrad.maxpool2d(h)
            else:
                raise ValidationError(f"unknown layer kind {layer.kind!r}")
        return h

    def num_parameters(self):
        return int(sum(t.data.size for t in self.params.values()))

    def astype(self, dtype):
        """Copy of this network with every parameter and buffer cast to ``dtype``."""
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return Network(list(self.layers), params, buffers, self.input_shape, self.mode)

    def state_dict(self):
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_dict(self, state):
        for k, t in self.params.items():
            if k not in state or state[k].shape != t.shape:
                raise FormatError(f"checkpoint missing or mismatched parameter {k!r}")
            t.data = state[k].astype(t.dtype).copy()
        for k, b in self.buffers.items():
            if k not in state or state[k].shape != b.shape:
                raise FormatError(f"checkpoint missing or mismatched buffer {k!r}")
            b[...] = state[k]


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_mlp(input_dim, hidden_dims, class_count, init_seed, dtype=np.float32, input_shape=None):
    """Fully connected relu network; inputs of any shape are flattened first."""
    hidden_dims = list(hidden_dims)
    if not hidden_dims:
        raise ValidationError("build_mlp needs at least one hidden layer")
    rng = np.random.default_rng(init_seed)
    layers = [LayerSpec("flatten")]
    params = {}
    dims = [input_dim] + hidden_dims + [class_count]
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        name = "head" if i == len(dims) - 2 else f"fc{i}"
        layers.append(LayerSpec("dense", name, (d_in, d_out)))
        params[name + ".weight"] = Tensor(_he(rng, (d_in, d_out), d_in, dtype), requires_grad=True, name=name + ".weight")
        params[name + ".bias"] = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True, name=name + ".bias")
        if name != "head":
            layers.append(LayerSpec("relu"))
    shape = tuple(input_shape) if input_shape is not None else (input_dim,)
    if int(np.prod(shape)) != input_dim:
        raise DimensionError(f"input_shape {shape} does not flatten to {input_dim}")
    return Network(layers, params, {}, shape)


CNN7_WIDTHS = (64, 64, 128, 128, 196, 196)


def build_cnn7(class_count, init_seed, dtype=np.float32):
    """Three (conv-BN-relu x2, maxpool) blocks on 3x32x32 and one dense head."""
    rng = np.random.default_rng(init_seed)
    layers, params, buffers = [], {}, {}
    c_in = 3
    for i, c_out in enumerate(CNN7_WIDTHS):
        conv, bn = f"conv{i}", f"bn{i}"
        layers += [LayerSpec("conv", conv, (c_in, c_out)), LayerSpec("bn", bn, (c_out,)), LayerSpec("relu")]
        params[conv + ".weight"] = Tensor(_he(rng, (c_out, c_in, 3, 3), c_in * 9, dtype), True, conv + ".weight")
        params[conv + ".bias"] = Tensor(np.zeros(c_out, dtype=dtype), True, conv + ".bias")
        params[bn + ".weight"] = Tensor(np.ones(c_out, dtype=dtype), True, bn + ".weight")
        params[bn + ".bias"] = Tensor(np.zeros(c_out, dtype=dtype), True, bn + ".bias")
        buffers[bn + ".running_mean"] = np.zeros(c_out, dtype=dtype)
        buffers[bn + ".running_var"] = np.ones(c_out, dtype=dtype)
        if i % 2 == 1:
            layers.append(LayerSpec("maxpool"))
        c_in = c_out
    flat = CNN7_WIDTHS[-1] * 4 * 4
    layers += [LayerSpec("flatten"), LayerSpec("dense", "head", (flat, class_count))]
    params["head.weight"] = Tensor(_he(rng, (flat, class_count), flat, dtype), True, "head.weight")
    params["head.bias"] = Tensor(np.zeros(class_count, dtype=dtype), True, "head.bias")
    return Network(layers, params, buffers, (3, 32, 32))


def predict(network, batch):
    """Softmax probabilities [N, C] in the network's current mode, no graph recorded."""
    batch = np.asarray(batch)
    if network.input_shape and tuple(batch.shape[1:]) != tuple(network.input_shape):
        raise DimensionError(f"predict: batch {batch.shape} does not match input shape {network.input_shape}")
    with ndgrad.no_graph():
        logits = network.forward(batch, update_stats=False)
    return ndgrad.softmax(logits.data)


def accuracy(network, images, labels, batch_size=500):
    """Fraction of correct argmax predictions; evaluates in eval mode."""
    mode = network.mode
    network.eval()
    correct = 0
    for start in range(0, len(images), batch_size):
        probs = predict(network, images[start:start + batch_size])
        correct += int((probs.argmax(axis=1) == labels[start:start + batch_size]).sum())
    network.mode = mode
    return correct / len(images)


# ----------------------------------------------------------- checkpoints
#
# Layout (little endian):
#   b"CMCK" | u32 version | u32 entry count
#   per entry: u16 name length | name (utf-8) | u8 dtype code | u8 ndim | u32 dims... | raw values

CHECKPOINT_MAGIC = b"CMCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, arrays):
    """Write a name -> array mapping."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<")
            if dt not in _DTYPE_CODES:
                raise ValidationError(f"cannot checkpoint dtype {arr.dtype} ({name})")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dt = _CODE_DTYPES[code]
            size = int(np.prod(shape)) * dt.itemsize
            if pos + size > len(blob):
                raise FormatError(f"{path}: truncated entry {name!r}")
            out[name] = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return out
