"""Small feed-forward convolutional network with exact backpropagation.

Layers: conv (stride 1, same padding), relu, maxpool (2x2, floor), fc,
inverted dropout. The terminal fc carries no bias so the score vector is
exactly the dot product between the penultimate activations and the terminal
weight columns. float32 for training, float64 mode for gradient checking.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError, ParameterError, StateError, StructuralError
from .wordgen import mix_seed

CHECKPOINT_MAGIC = b"LWNET1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | maxpool | fc | dropout
    out_channels: int | None = None
    kernel: int | None = None
    out_dim: int | None = None
    has_bias: bool = True
    rate: float | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(out_channels=self.out_channels, kernel=self.kernel)
        elif self.kind == "fc":
            d.update(out_dim=self.out_dim, has_bias=self.has_bias)
        elif self.kind == "dropout":
            d.update(rate=self.rate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(out_channels: int, kernel: int) -> LayerSpec:
    return LayerSpec("conv", out_channels=out_channels, kernel=kernel)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool() -> LayerSpec:
    return LayerSpec("maxpool")


def fc(out_dim: int, has_bias: bool = True) -> LayerSpec:
    return LayerSpec("fc", out_dim=out_dim, has_bias=has_bias)


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def desk_preset(k: int) -> tuple[list[LayerSpec], tuple[int, int, int]]:
    """Trains in minutes on one core while exercising every layer kind."""
    specs = [
        conv(8, 5), relu(), maxpool(),
        conv(16, 3), relu(), maxpool(),
        fc(128), relu(), dropout(0.2),
        fc(64), relu(), dropout(0.2),
        fc(k, has_bias=False),
    ]
    return specs, (1, 16, 48)


def paper_preset(k: int) -> tuple[list[LayerSpec], tuple[int, int, int]]:
    """Five conv layers, pooling after 1, 2 and 4, three fc layers."""
    specs = [
        conv(64, 5), relu(), maxpool(),
        conv(128, 5), relu(), maxpool(),
        conv(256, 3), relu(),
        conv(512, 3), relu(), maxpool(),
        conv(512, 3), relu(),
        fc(4096), relu(), dropout(0.5),
        fc(4096), relu(), dropout(0.5),
        fc(k, has_bias=False),
    ]
    return specs, (1, 32, 100)


def get_preset(name: str, k: int):
    if name == "desk":
        return desk_preset(k)
    if name == "paper":
        return paper_preset(k)
    raise ParameterError(f"unknown preset {name!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 0.007
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    dropout_enabled: bool = True
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int | None = None  # default: 2/3 of epochs

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must be in [0,1)")
        if self.batch_size < 1:
            raise ParameterError("batch size must be >= 1")

    def decay_epoch(self) -> int:
        if self.lr_decay_epoch is not None:
            return self.lr_decay_epoch
        return max(1, (2 * self.epochs) // 3)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "dropout_enabled": self.dropout_enabled,
            "lr_decay_factor": self.lr_decay_factor,
            "lr_decay_epoch": self.lr_decay_epoch,
        }


def _validate_specs(specs: list[LayerSpec]):
    fc_idx = [i for i, s in enumerate(specs) if s.kind == "fc"]
    if len(fc_idx) < 2:
        raise StructuralError("need at least two fc layers (embedding tap + scoring)")
    for i, s in enumerate(specs):
        if s.kind == "conv":
            if s.kernel is None or s.kernel % 2 == 0:
                raise StructuralError(f"layer {i}: conv kernel must be odd")
            if not s.out_channels:
                raise StructuralError(f"layer {i}: conv needs out_channels")
        elif s.kind == "fc":
            if not s.out_dim:
                raise StructuralError(f"layer {i}: fc needs out_dim")
        elif s.kind == "dropout":
            if s.rate is None or not 0.0 <= s.rate < 1.0:
                raise StructuralError(f"layer {i}: dropout rate must be in [0,1)")
        elif s.kind not in ("relu", "maxpool"):
            raise StructuralError(f"layer {i}: unknown kind {s.kind!r}")
    biasless = [i for i in fc_idx if not specs[i].has_bias]
    if biasless != [fc_idx[-1]]:
        raise StructuralError("exactly the terminal fc must have has_bias=False")


class Network:
    """Ordered layer stack with parameters and named activation taps."""

    def __init__(self, specs, input_shape, dtype=np.float32, seed: int = 0, params=None):
        _validate_specs(specs)
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)  # (C, H, W)
        self.dtype = np.dtype(dtype)
        self.layer_input_shapes = self._trace_shapes()
        fc_idx = [i for i, s in enumerate(self.specs) if s.kind == "fc"]
        self.scoring_index = fc_idx[-1]
        penult = fc_idx[-2]
        nxt = penult + 1
        self.phi_index = nxt if nxt < len(self.specs) and self.specs[nxt].kind == "relu" else penult
        self.params = params if params is not None else self._init_params(seed)

    # ---- construction -----------------------------------------------------
    def _trace_shapes(self):
        shapes = []
        shape = self.input_shape
        for i, s in enumerate(self.specs):
            shapes.append(shape)
            if s.kind == "conv":
                if len(shape) != 3:
                    raise StructuralError(f"layer {i}: conv needs spatial input, got {shape}")
                shape = (s.out_channels, shape[1], shape[2])
            elif s.kind == "maxpool":
                if len(shape) != 3:
                    raise StructuralError(f"layer {i}: maxpool needs spatial input, got {shape}")
                if shape[1] < 2 or shape[2] < 2:
                    raise StructuralError(f"layer {i}: spatial extent too small to pool: {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif s.kind == "fc":
                shape = (s.out_dim,)
        shapes.append(shape)
        return shapes

    def _fan(self, i: int):
        s = self.specs[i]
        in_shape = self.layer_input_shapes[i]
        if s.kind == "conv":
            fan_in = in_shape[0] * s.kernel * s.kernel
            fan_out = s.out_channels * s.kernel * s.kernel
        else:
            fan_in = int(np.prod(in_shape))
            fan_out = s.out_dim
        return fan_in, fan_out

    def _init_params(self, seed: int):
        params = []
        for i, s in enumerate(self.specs):
            if s.kind == "conv":
                rng = np.random.default_rng(np.random.PCG64(mix_seed(seed, i)))
                fan_in, fan_out = self._fan(i)
                a = np.sqrt(6.0 / (fan_in + fan_out))
                in_c = self.layer_input_shapes[i][0]
                w = rng.uniform(-a, a, size=(s.out_channels, in_c, s.kernel, s.kernel))
                params.append({"W": w.astype(self.dtype), "b": np.zeros(s.out_channels, self.dtype)})
            elif s.kind == "fc":
                rng = np.random.default_rng(np.random.PCG64(mix_seed(seed, i)))
                fan_in, fan_out = self._fan(i)
                a = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-a, a, size=(fan_in, s.out_dim))
                p = {"W": w.astype(self.dtype)}
                if s.has_bias:
                    p["b"] = np.zeros(s.out_dim, self.dtype)
                params.append(p)
            else:
                params.append({})
        return params

    # ---- views ------------------------------------------------------------
    @property
    def k(self) -> int:
        return self.specs[self.scoring_index].out_dim

    @property
    def embedding_dim(self) -> int:
        return int(np.prod(self.layer_input_shapes[self.scoring_index]))

    @property
    def concept_matrix(self) -> np.ndarray:
        """D x K weight matrix of the scoring layer (concept embeddings)."""
        return self.params[self.scoring_index]["W"]

    def named_params(self):
        for i, p in enumerate(self.params):
            for name in sorted(p):
                yield f"{i}.{name}", p[name]

    def astype(self, dtype) -> "Network":
        params = [{k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return Network(self.specs, self.input_shape, dtype, params=params)

    def copy(self) -> "Network":
        params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        return Network(self.specs, self.input_shape, self.dtype, params=params)


# ---------------------------------------------------------------------------
# conv helpers

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B,C,H,W) -> (B, H*W, C*k*k) patches under same padding, stride 1."""
    b, c, h, w = x.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k * k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * k * k, h * w).transpose(0, 2, 1)


def _col2im(dcols: np.ndarray, x_shape, k: int) -> np.ndarray:
    """Adjoint of _im2col: (B, H*W, C*k*k) -> (B,C,H,W)."""
    b, c, h, w = x_shape
    pad = (k - 1) // 2
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.transpose(0, 2, 1).reshape(b, c, k * k, h, w)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, i * k + j]
    return dxp[:, :, pad:pad + h, pad:pad + w]


@dataclass
class ForwardResult:
    scores: np.ndarray  # B x K
    phi: np.ndarray     # B x D
    caches: list | None


def forward(
    net: Network,
    batch: np.ndarray,
    mode: str = "train",
    seed: int = 0,
    use_dropout: bool = True,
) -> ForwardResult:
    """Run the stack; caches are kept only in train mode.

    Dropout uses inverted scaling in train mode and is the identity in eval
    mode; masks are a pure function of (seed, layer index).
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be train or eval, got {mode!r}")
    x = np.asarray(batch, dtype=net.dtype)
    if x.ndim == 3:  # B x H x W grayscale
        x = x[:, None, :, :]
    if tuple(x.shape[1:]) != net.input_shape:
        raise StructuralError(
            f"input shape {tuple(x.shape[1:])} does not match network input {net.input_shape}"
        )
    train = mode == "train"
    caches = [] if train else None
    phi = None
    for i, s in enumerate(net.specs):
        if s.kind == "conv":
            k = s.kernel
            cols = _im2col(x, k)
            wmat = net.params[i]["W"].reshape(s.out_channels, -1)
            out = cols @ wmat.T + net.params[i]["b"]
            b_, c_, h, w = x.shape
            y = out.transpose(0, 2, 1).reshape(b_, s.out_channels, h, w)
            if train:
                caches.append(("conv", cols, x.shape))
            x = y
        elif s.kind == "relu":
            mask = x > 0
            if train:
                caches.append(("relu", mask))
            x = x * mask
        elif s.kind == "maxpool":
            b_, c_, h, w = x.shape
            h2, w2 = h // 2, w // 2
            win = x[:, :, :h2 * 2, :w2 * 2]
            win = win.reshape(b_, c_, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
            win = win.reshape(b_, c_, h2, w2, 4)
            idx = win.argmax(axis=-1)
            y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
            if train:
                caches.append(("maxpool", idx, x.shape))
            x = y
        elif s.kind == "fc":
            flat = x.reshape(x.shape[0], -1)
            y = flat @ net.params[i]["W"]
            if "b" in net.params[i]:
                y = y + net.params[i]["b"]
            if train:
                caches.append(("fc", flat, x.shape))
            x = y
        elif s.kind == "dropout":
            if train and use_dropout:
                rng = np.random.default_rng(np.random.PCG64(mix_seed(seed, i)))
                mask = (rng.random(x.shape) >= s.rate).astype(net.dtype)
                scale = net.dtype.type(1.0 / (1.0 - s.rate))
                caches.append(("dropout", mask, scale))
                x = x * mask * scale
            elif train:
                caches.append(("dropout", None, None))
            # identity at eval
        if i == net.phi_index:
            phi = x.reshape(x.shape[0], -1)
    return ForwardResult(scores=x, phi=phi, caches=caches)


def backward(net: Network, caches: list, dscores: np.ndarray):
    """Backpropagate dLoss/dY through the cached forward pass.

    Returns (grads, dinput); grads mirrors net.params.
    """
    if caches is None:
        raise StateError("backward requires caches from a train-mode forward")
    if len(caches) != len(net.specs):
        raise StateError("cache/spec length mismatch; was forward run in train mode?")
    grads = [{} for _ in net.specs]
    dx = np.asarray(dscores, dtype=net.dtype)
    for i in range(len(net.specs) - 1, -1, -1):
        s = net.specs[i]
        cache = caches[i]
        if s.kind == "conv":
            _, cols, x_shape = cache
            b_, c_, h, w = x_shape
            dout = dx.reshape(b_, s.out_channels, h * w).transpose(0, 2, 1)
            wmat = net.params[i]["W"].reshape(s.out_channels, -1)
            dW = np.einsum("bpo,bpc->oc", dout, cols)
            grads[i]["W"] = dW.reshape(net.params[i]["W"].shape)
            grads[i]["b"] = dout.sum(axis=(0, 1))
            dcols = dout @ wmat
            dx = _col2im(dcols, x_shape, s.kernel)
        elif s.kind == "relu":
            _, mask = cache
            dx = dx * mask
        elif s.kind == "maxpool":
            _, idx, x_shape = cache
            b_, c_, h, w = x_shape
            h2, w2 = h // 2, w // 2
            dwin = np.zeros((b_, c_, h2, w2, 4), dtype=dx.dtype)
            np.put_along_axis(dwin, idx[..., None], dx[..., None], axis=-1)
            dwin = dwin.reshape(b_, c_, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            dfull = np.zeros((b_, c_, h, w), dtype=dx.dtype)
            dfull[:, :, :h2 * 2, :w2 * 2] = dwin.reshape(b_, c_, h2 * 2, w2 * 2)
            dx = dfull
        elif s.kind == "fc":
            _, flat, x_shape = cache
            grads[i]["W"] = flat.T @ dx
            if "b" in net.params[i]:
                grads[i]["b"] = dx.sum(axis=0)
            dx = (dx @ net.params[i]["W"].T).reshape(x_shape)
        elif s.kind == "dropout":
            _, mask, scale = cache
            if mask is not None:
                dx = dx * mask * scale
    return grads, dx


def new_velocity(net: Network):
    return [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]


def sgd_step(net: Network, grads, config: TrainConfig, velocity, lr: float | None = None):
    """In-place momentum SGD: v <- m*v - lr*(g + wd*w); w <- w + v."""
    lr = config.learning_rate if lr is None else lr
    for i, (p, g, v) in enumerate(zip(net.params, grads, velocity)):
        for name in p:
            grad = g.get(name)
            if grad is None:
                continue
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient in layer {i} ({name})")
            v[name] = config.momentum * v[name] - lr * (grad + config.weight_decay * p[name])
            p[name] += v[name]
    return net, velocity


def init(specs, input_shape, seed: int = 0, dtype=np.float32) -> Network:
    return Network(specs, input_shape, dtype=dtype, seed=seed)


def resize_scoring_layer(net: Network, new_k: int, seed: int = 0) -> Network:
    """Widen the scoring layer to new_k outputs, keeping the old columns."""
    old_k = net.k
    if new_k < old_k:
        raise ParameterError(f"new_k {new_k} < current K {old_k}")
    out = net.copy()
    i = net.scoring_index
    out.specs[i] = fc(new_k, has_bias=False)
    d = net.embedding_dim
    a = np.sqrt(6.0 / (d + new_k))
    rng = np.random.default_rng(np.random.PCG64(mix_seed(seed, i)))
    w = rng.uniform(-a, a, size=(d, new_k)).astype(net.dtype)
    w[:, :old_k] = net.params[i]["W"]
    params = [{k: v.copy() for k, v in p.items()} for p in net.params]
    params[i] = {"W": w}
    return Network(out.specs, net.input_shape, net.dtype, params=params)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(net: Network, path) -> None:
    """Little-endian container: magic, version, JSON spec blob, raw tensors."""
    meta = {
        "layers": [s.to_dict() for s in net.specs],
        "input_shape": list(net.input_shape),
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, tensor in net.named_params():
            nb = name.encode("utf-8")
            f.write(struct.pack("<B", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", tensor.ndim))
            for dim in tensor.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:6]!r}")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (version,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos:pos + blob_len].decode("utf-8"))
        pos += blob_len
        specs = [LayerSpec.from_dict(d) for d in meta["layers"]]
        tensors = {}
        while pos < len(data):
            (nlen,) = struct.unpack_from("<B", data, pos)
            pos += 1
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = int(np.prod(dims)) * 4
            payload = data[pos:pos + nbytes]
            if len(payload) != nbytes:
                raise FormatError(f"truncated tensor payload for {name!r}")
            pos += nbytes
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    except (struct.error, json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from None
    params = [{} for _ in specs]
    for name, tensor in tensors.items():
        idx, pname = name.split(".", 1)
        params[int(idx)][pname] = tensor
    net = Network(specs, meta["input_shape"], np.float32, params=params)
    for i, s in enumerate(specs):  # verify every declared parameter arrived
        if s.kind in ("conv", "fc"):
            expect = {"W", "b"} if (s.kind == "conv" or s.has_bias) else {"W"}
            if set(params[i]) != expect:
                raise FormatError(f"layer {i} missing tensors: {expect - set(params[i])}")
    return net
