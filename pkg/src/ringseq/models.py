"""The five classifier variants and their checkpoint format.

All variants share one patch encoder::

    conv3x3(8) -> relu -> pool2 -> conv3x3(16) -> relu -> pool2
    -> conv3x3(32) -> relu -> pool2 -> flatten -> dense(d) -> relu

The IMAGE variant runs the same stack on a 64x64 downscaled image with one
extra pool before the flatten.  Sequence variants (SOS, SOP, ROP) feed an
LSTM of width H and classify its last hidden state; VOTE and IMAGE put the
head directly on the encoder feature.  Models emit logits; softmax belongs to
the loss and the evaluation code.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .geometry import SOS, Patch, PatchSequence

IMAGE, VOTE, ROP, SOP = "IMAGE", "VOTE", "ROP", "SOP"
VARIANTS = (IMAGE, VOTE, ROP, SOP, SOS)
SEQUENCE_VARIANTS = (ROP, SOP, SOS)

MAGIC = b"SOSM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    patch_side: int = 32
    channels: int = 3
    conv_channels: tuple = (8, 16, 32)
    feature_dim: int = 64
    image_side: int = 64

    def __post_init__(self):
        if self.patch_side % 8:
            raise ValueError("patch_side must be divisible by 8")
        if self.image_side % 16:
            raise ValueError("image_side must be divisible by 16")
        if len(self.conv_channels) != 3:
            raise ValueError("encoder has exactly three conv blocks")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))

    def input_side(self, variant: str) -> int:
        return self.image_side if variant == IMAGE else self.patch_side

    def flat_dim(self, variant: str) -> int:
        cells = self.image_side // 16 if variant == IMAGE else self.patch_side // 8
        return cells * cells * self.conv_channels[-1]


@dataclass(eq=False)
class ModelParams:
    variant: str
    encoder: EncoderConfig
    n_classes: int
    hidden: int = 64
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # geometry and class names, carried in checkpoints

    def __getitem__(self, name):
        return self.tensors[name]

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.variant, self.encoder, self.n_classes, self.hidden,
                           {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))

    def bit_equal(self, other: "ModelParams") -> bool:
        return (
            self.variant == other.variant
            and self.encoder == other.encoder
            and self.n_classes == other.n_classes
            and self.hidden == other.hidden
            and self.meta == other.meta
            and list(self.tensors) == list(other.tensors)
            and all(a.shape == b.shape and a.tobytes() == b.tobytes()
                    for a, b in zip(self.tensors.values(), other.tensors.values()))
        )

    @property
    def head_input_dim(self) -> int:
        return self.hidden if self.variant in SEQUENCE_VARIANTS else self.encoder.feature_dim


def param_shapes(variant: str, enc: EncoderConfig, n_classes: int, hidden: int) -> dict:
    shapes = {}
    cin = enc.channels
    for k, cout in enumerate(enc.conv_channels, start=1):
        shapes[f"conv{k}.w"] = (3, 3, cin, cout)
        shapes[f"conv{k}.b"] = (cout,)
        cin = cout
    d = enc.feature_dim
    shapes["enc.w"] = (enc.flat_dim(variant), d)
    shapes["enc.b"] = (d,)
    head_in = d
    if variant in SEQUENCE_VARIANTS:
        shapes["lstm.w"] = (d + hidden, 4 * hidden)
        shapes["lstm.b"] = (4 * hidden,)
        head_in = hidden
    shapes["head.w"] = (head_in, n_classes)
    shapes["head.b"] = (n_classes,)
    return shapes


def init_params(variant: str, enc: EncoderConfig, n_classes: int, hidden: int = 64,
                seed=0) -> ModelParams:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(variant, enc, n_classes, hidden).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
            if name == "lstm.b":
                arr[hidden:2 * hidden] = 1.0
        else:
            if len(shape) == 4:
                fan_in, fan_out = 9 * shape[2], 9 * shape[3]
            else:
                fan_in, fan_out = shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-lim, lim, size=shape)
        tensors[name] = arr
    return ModelParams(variant, enc, n_classes, hidden, tensors)


# ---------------------------------------------------------------- encoder


def encode_forward(x: np.ndarray, params: ModelParams, extra_pool: bool = False):
    """x: (N, s, s, c) -> features (N, d)."""
    caches = []
    for k in (1, 2, 3):
        x, c_conv = nn.conv2d_forward(x, params[f"conv{k}.w"], params[f"conv{k}.b"])
        x, c_relu = nn.relu_forward(x)
        x, c_pool = nn.maxpool2d_forward(x)
        caches.append((c_conv, c_relu, c_pool))
    c_extra = None
    if extra_pool:
        x, c_extra = nn.maxpool2d_forward(x)
    pooled_shape = x.shape
    flat = x.reshape(x.shape[0], -1)
    z, c_dense = nn.dense_forward(flat, params["enc.w"], params["enc.b"])
    f, c_out = nn.relu_forward(z)
    return f, (caches, c_extra, pooled_shape, c_dense, c_out)


def encode_backward(dfeat: np.ndarray, cache, grads: dict) -> None:
    caches, c_extra, pooled_shape, c_dense, c_out = cache
    dz = nn.relu_backward(dfeat, c_out)
    dflat, dw, db = nn.dense_backward(dz, c_dense)
    grads["enc.w"] += dw
    grads["enc.b"] += db
    dx = dflat.reshape(pooled_shape)
    if c_extra is not None:
        dx = nn.maxpool2d_backward(dx, c_extra)
    for k in (3, 2, 1):
        c_conv, c_relu, c_pool = caches[k - 1]
        dx = nn.maxpool2d_backward(dx, c_pool)
        dx = nn.relu_backward(dx, c_relu)
        if k == 1:
            # input gradient of the first layer is never needed
            xshape, cols, w = c_conv
            d2 = dx.reshape(-1, w.shape[3])
            grads["conv1.w"] += (cols.T @ d2).reshape(w.shape)
            grads["conv1.b"] += d2.sum(axis=0)
        else:
            dx, dw, db = nn.conv2d_backward(dx, c_conv)
            grads[f"conv{k}.w"] += dw
            grads[f"conv{k}.b"] += db


def _stack(patches) -> np.ndarray:
    return np.stack([p.data if isinstance(p, Patch) else p for p in patches])


def encode_patch(patch, params: ModelParams) -> np.ndarray:
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    if data.shape != (params.encoder.patch_side,) * 2 + (params.encoder.channels,):
        raise nn.ShapeError(f"patch shape {data.shape} does not match encoder config")
    return encode_forward(data[None], params)[0][0]


# ---------------------------------------------------------------- variant forwards
#
# Each ``_fwd_*`` takes an array-level input and returns (logits, cache); the
# matching ``_bwd_*`` accumulates parameter gradients into ``grads``.
# Inputs: SOS -> (stacked patches (N,s,s,c), set sizes); SOP/ROP/VOTE ->
# stacked patches; IMAGE -> (1, S, S, c).


def _fwd_sos(inp, params: ModelParams):
    x, sizes = inp
    feats, c_enc = encode_forward(x, params)
    pooled, c_pool = [], []
    start = 0
    for n in sizes:
        if n < 1:
            raise nn.ShapeError("SOS sets must be non-empty")
        v, c = nn.set_maxpool_forward(feats[start:start + n])
        pooled.append(v)
        c_pool.append(c)
        start += n
    h, c_lstm = nn.lstm_sequence_forward(pooled, params["lstm.w"], params["lstm.b"])
    logits, c_head = nn.dense_forward(h, params["head.w"], params["head.b"])
    return logits, (c_enc, sizes, c_pool, c_lstm, c_head, h)


def _bwd_sos(dlogits, cache, params, grads):
    c_enc, sizes, c_pool, c_lstm, c_head, _ = cache
    dh = _head_backward(dlogits, c_head, grads)
    dxs = _lstm_backward(dh, c_lstm, params, grads)
    dfeats = np.concatenate([nn.set_maxpool_backward(dxs[i], c_pool[i]) for i in range(len(sizes))])
    encode_backward(dfeats, c_enc, grads)


def _fwd_seq(x, params: ModelParams):
    feats, c_enc = encode_forward(x, params)
    h, c_lstm = nn.lstm_sequence_forward(list(feats), params["lstm.w"], params["lstm.b"])
    logits, c_head = nn.dense_forward(h, params["head.w"], params["head.b"])
    return logits, (c_enc, c_lstm, c_head, h)


def _bwd_seq(dlogits, cache, params, grads):
    c_enc, c_lstm, c_head, _ = cache
    dh = _head_backward(dlogits, c_head, grads)
    encode_backward(_lstm_backward(dh, c_lstm, params, grads), c_enc, grads)


def _fwd_flat(x, params: ModelParams, extra_pool: bool):
    feats, c_enc = encode_forward(x, params, extra_pool)
    logits, c_head = nn.dense_forward(feats, params["head.w"], params["head.b"])
    return logits, (c_enc, c_head, feats)


def _bwd_flat(dlogits, cache, params, grads):
    c_enc, c_head, _ = cache
    encode_backward(_head_backward(dlogits, c_head, grads), c_enc, grads)


def _head_backward(dlogits, c_head, grads):
    dx, dw, db = nn.dense_backward(dlogits, c_head)
    grads["head.w"] += dw
    grads["head.b"] += db
    return dx


def _lstm_backward(dh, c_lstm, params, grads):
    dxs, dw, db = nn.lstm_sequence_backward(dh, c_lstm, params["lstm.w"])
    grads["lstm.w"] += dw
    grads["lstm.b"] += db
    return dxs


def forward(inp, params: ModelParams):
    """Array-level forward for ``params.variant``.  Returns (logits, cache).

    VOTE returns per-patch logits of shape (N, C); every other variant (C,).
    """
    v = params.variant
    if v == SOS:
        return _fwd_sos(inp, params)
    if v in (SOP, ROP):
        return _fwd_seq(inp, params)
    if v == IMAGE:
        logits, cache = _fwd_flat(inp, params, extra_pool=True)
        return logits[0], cache
    return _fwd_flat(inp, params, extra_pool=False)


def backward(dlogits, cache, params: ModelParams, grads: dict | None = None) -> dict:
    grads = params.zeros_like() if grads is None else grads
    v = params.variant
    if v == SOS:
        _bwd_sos(dlogits, cache, params, grads)
    elif v in (SOP, ROP):
        _bwd_seq(dlogits, cache, params, grads)
    elif v == IMAGE:
        _bwd_flat(dlogits[None], cache, params, grads)
    else:
        _bwd_flat(dlogits, cache, params, grads)
    return grads


def loss_and_grads(inp, label: int, params: ModelParams):
    """Cross-entropy and its parameter gradients for one sample.

    VOTE trains every patch against the image label; its loss is the mean
    per-patch cross-entropy.  Returns (loss, grads, logits).
    """
    logits, cache = forward(inp, params)
    if params.variant == VOTE:
        n = logits.shape[0]
        losses, dl = zip(*(nn.cross_entropy(row, label) for row in logits))
        loss = float(sum(losses)) / n
        dlogits = np.stack(dl) / n
    else:
        loss, dlogits = nn.cross_entropy(logits, label)
    return loss, backward(dlogits, cache, params), logits


def head_features(inp, params: ModelParams) -> np.ndarray:
    """The vector the classification head sees (mean patch feature for VOTE)."""
    logits, cache = forward(inp, params)
    if params.variant in SEQUENCE_VARIANTS:
        return cache[-1]
    feats = cache[-1]
    return feats.mean(axis=0) if params.variant == VOTE else feats[0]


# ---------------------------------------------------------------- object-level API


def sequence_input(seq: PatchSequence, variant: str):
    """Convert a PatchSequence to the array input ``forward`` expects."""
    if variant == SOS:
        if seq.mode != SOS:
            raise ValueError("SOS variant needs an SOS sequence")
        return _stack(seq.patches()), [len(s) for s in seq.sets]
    return _stack(seq.patches())


def forward_sos(seq: PatchSequence, params: ModelParams) -> np.ndarray:
    if any(len(s) == 0 for s in seq.sets):
        raise nn.ShapeError("SOS sets must be non-empty")
    return _fwd_sos(sequence_input(seq, SOS), params)[0]


def forward_sop(seq: PatchSequence, params: ModelParams) -> np.ndarray:
    return _fwd_seq(sequence_input(seq, SOP), params)[0]


forward_rop = forward_sop


def vote(patch_logits: np.ndarray) -> int:
    """Majority vote; ties -> larger summed softmax mass, then lower class index."""
    patch_logits = np.atleast_2d(patch_logits)
    probs = nn.softmax(patch_logits)
    preds = probs.argmax(axis=1)
    counts = np.bincount(preds, minlength=probs.shape[1])
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1:
        return int(tied[0])
    mass = probs[:, tied].sum(axis=0)
    return int(tied[np.flatnonzero(mass == mass.max())[0]])


def forward_vote(patches, params: ModelParams):
    logits = _fwd_flat(_stack(patches), params, extra_pool=False)[0]
    return list(logits), vote(logits)


def image_input(img, enc: EncoderConfig) -> np.ndarray:
    from .geometry import downscale

    small = downscale(img, enc.image_side, enc.image_side)
    return (small.pixels.astype(np.float64) / 255.0)[None]


def forward_image(img, params: ModelParams) -> np.ndarray:
    return _fwd_flat(image_input(img, params.encoder), params, extra_pool=True)[0][0]


# ---------------------------------------------------------------- checkpoints


def _header(params: ModelParams) -> dict:
    entries, offset = [], 0
    for name, arr in params.tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    return {
        "variant": params.variant,
        "encoder": asdict(params.encoder),
        "n_classes": params.n_classes,
        "hidden": params.hidden,
        "lstm_gate_order": "".join(nn.GATE_ORDER),
        "dtype": "<f8",
        "meta": params.meta,
        "tensors": entries,
    }


def checkpoint_bytes(params: ModelParams) -> bytes:
    header = json.dumps(_header(params), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.tensors.values())
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + payload


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def parse_checkpoint(buf: bytes) -> ModelParams:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version, hlen = struct.unpack("<IQ", buf[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(buf) < 16 + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from None
    payload = buf[16 + hlen:]
    try:
        if header["variant"] not in VARIANTS:
            raise ValueError(f"unknown variant {header['variant']!r}")
        enc = EncoderConfig(**header["encoder"])
        expected = param_shapes(header["variant"], enc, header["n_classes"], header["hidden"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"invalid header: {e}") from None
    tensors, offset = {}, 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"tensor {name} has unexpected shape {shape}")
        if entry["offset"] != offset:
            raise CheckpointError(f"tensor {name} offset {entry['offset']} != {offset}")
        nbytes = int(np.prod(shape)) * 8
        if offset + nbytes > len(payload):
            raise CheckpointError("payload shorter than header declares")
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"payload length {len(payload)} != declared {offset}")
    if list(tensors) != list(expected):
        raise CheckpointError("tensor list does not match the variant layout")
    return ModelParams(header["variant"], enc, header["n_classes"], header["hidden"], tensors,
                       header.get("meta", {}))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
