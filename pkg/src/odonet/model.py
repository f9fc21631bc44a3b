"""Model assembly: Siamese conv encoder with correlation (or a stacked-input
variant), two recurrent layers, many-to-one readout, and the ordinal or
regression head; plus layer freezing and binary checkpoints.

The encoder follows the classic optical-flow extractor layout: conv_1..3
shared across both frames, a correlation layer joining the branches, a 1x1
conv_redir on branch A concatenated with the correlation output, then
conv_3_1 .. conv_6_1 shrinking to the final grid. Every conv is followed
by leaky ReLU; there is no batch normalization, so checkpoints carry no
running statistics.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers
from . import tensor as T
from .codec import DistanceCodec
from .config import RunConfig
from .errors import (
    CheckpointVersionError,
    ConfigError,
    ContractError,
    DimensionError,
    ParseError,
)
from .layers import BiLstmLayer, LstmParams
from .tensor import Tensor

CHECKPOINT_MAGIC = b"ODONETCK"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {1: np.float32, 2: np.float64}
_TAG_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

# (name, out_channels, kernel, stride) at full scale
FULL_SCHEDULE = (
    ("conv_1", 64, 7, 2),
    ("conv_2", 128, 5, 2),
    ("conv_3", 256, 5, 2),
    ("conv_redir", 32, 1, 1),
    ("conv_3_1", 256, 3, 1),
    ("conv_4", 512, 3, 2),
    ("conv_4_1", 512, 3, 1),
    ("conv_5", 512, 3, 2),
    ("conv_5_1", 512, 3, 1),
    ("conv_6", 1024, 3, 2),
    ("conv_6_1", 1024, 3, 1),
)
_SMALL_KERNELS = {"conv_1": 5, "conv_2": 3, "conv_3": 3}
STEM = ("conv_1", "conv_2", "conv_3")


@dataclass(frozen=True)
class EncoderStage:
    name: str
    out_channels: int
    kernel: int
    stride: int

    @property
    def padding(self) -> int:
        return self.kernel // 2


def build_schedule(channel_scale: float = 1.0, small_kernels: bool = False) -> tuple[EncoderStage, ...]:
    stages = []
    for name, ch, k, s in FULL_SCHEDULE:
        scaled = max(4, int(round(ch * channel_scale)))
        kernel = _SMALL_KERNELS.get(name, k) if small_kernels else k
        stages.append(EncoderStage(name, scaled, kernel, s))
    return tuple(stages)


@dataclass
class ModelConfig:
    resolution: tuple[int, int] = (768, 256)  # (W, H)
    encoder_kind: str = "flownetc"  # flownetc | flownets
    schedule: tuple[EncoderStage, ...] = field(default_factory=build_schedule)
    corr_max_disp: int = 20
    corr_stride: int = 2
    rnn_hidden: int = 800
    rnn_layers: int = 2
    rnn_cell: str = "bilstm"  # bilstm | lstm
    dropout_rate: float = 0.3
    dropout_rnn_input: bool = False
    head: str = "ordinal"  # ordinal | regression
    codec: DistanceCodec = field(default_factory=DistanceCodec)
    frozen: tuple[str, ...] = ()
    dtype: str = "float32"
    leaky_slope: float = 0.1
    window: int = 10

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def stage(self, name: str) -> EncoderStage:
        for s in self.schedule:
            if s.name == name:
                return s
        raise ConfigError(f"no encoder stage named {name!r}")

    def rnn_out_width(self) -> int:
        return 2 * self.rnn_hidden if self.rnn_cell == "bilstm" else self.rnn_hidden


def model_config_from_run(cfg: RunConfig) -> ModelConfig:
    w, h = cfg.resolution()
    return ModelConfig(
        resolution=(w, h),
        encoder_kind=str(cfg.get("model", "encoder")),
        schedule=build_schedule(
            float(cfg.get("model", "channel_scale")), bool(cfg.get("model", "small_kernels"))
        ),
        corr_max_disp=int(cfg.get("model", "corr_max_disp")),
        corr_stride=int(cfg.get("model", "corr_stride")),
        rnn_hidden=int(cfg.get("model", "rnn_hidden")),
        rnn_cell=str(cfg.get("model", "rnn_cell")),
        dropout_rate=float(cfg.get("model", "dropout")),
        dropout_rnn_input=bool(cfg.get("model", "dropout_rnn_input")),
        head=str(cfg.get("model", "head")),
        codec=cfg.codec_config(),
        frozen=cfg.frozen_names(),
        dtype=str(cfg.get("model", "dtype")),
        leaky_slope=float(cfg.get("model", "leaky_slope")),
        window=int(cfg.get("dataset", "window")),
    )


def desk_model_config(**overrides) -> ModelConfig:
    """Desk-scale defaults: 128x64 frames, quarter channel schedule with
    shrunk stem kernels, 64 recurrent cells per direction, correlation
    max_disp 4 / stride 1."""
    base = dict(
        resolution=(128, 64),
        schedule=build_schedule(0.25, small_kernels=True),
        corr_max_disp=4,
        corr_stride=1,
        rnn_hidden=64,
        codec=DistanceCodec(K=31, d_max=3.1),
    )
    base.update(overrides)
    return ModelConfig(**base)


def encoder_feature_geometry(cfg: ModelConfig) -> tuple[int, int, int]:
    """Walk the schedule and return the final (channels, grid_h, grid_w).

    Raises ConfigError naming the first stage whose output would collapse
    below 1x1.
    """
    w, h = cfg.resolution
    stem_in = 3 if cfg.encoder_kind == "flownetc" else 6

    def step(stage: EncoderStage, hh: int, ww: int) -> tuple[int, int]:
        ho = (hh + 2 * stage.padding - stage.kernel) // stage.stride + 1
        wo = (ww + 2 * stage.padding - stage.kernel) // stage.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(
                f"stage {stage.name}: output grid {ho}x{wo} collapses below 1x1 "
                f"for resolution {cfg.resolution}"
            )
        return ho, wo

    hh, ww = h, w
    channels = stem_in
    for stage in cfg.schedule:
        if stage.name == "conv_redir":
            continue
        if stage.name == "conv_3_1" and cfg.encoder_kind == "flownetc":
            channels = layers.correlation_channels(cfg.corr_max_disp, cfg.corr_stride)
            channels += cfg.stage("conv_redir").out_channels
        hh, ww = step(stage, hh, ww)
        channels = stage.out_channels
    return channels, hh, ww


def encoder_feature_width(cfg: ModelConfig) -> int:
    c, h, w = encoder_feature_geometry(cfg)
    return c * h * w


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Tensor]
    rnn: list  # BiLstmLayer or LstmParams per layer
    frozen_prefixes: tuple[str, ...] = ()

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith(self.frozen_prefixes)] \
            if self.frozen_prefixes else list(self.params)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def freeze_names(self) -> set[str]:
        """Layer names accepted by freeze_layers."""
        names = {s.name for s in self.cfg.schedule}
        if self.cfg.encoder_kind == "flownets":
            names.discard("conv_redir")
        names.update(f"rnn_l{i + 1}" for i in range(self.cfg.rnn_layers))
        names.add("head")
        return names


def _prefix_for(layer_name: str) -> str:
    if layer_name.startswith("conv"):
        return f"enc.{layer_name}."
    if layer_name.startswith("rnn_l"):
        return f"rnn.l{layer_name[5:]}."
    if layer_name == "head":
        return "head."
    raise ConfigError(f"unknown layer name {layer_name!r}")


def freeze_layers(model: Model, names) -> None:
    """Exclude the listed layers from optimizer updates; gradients still
    flow through them to earlier inputs."""
    valid = model.freeze_names()
    names = tuple(names)
    for n in names:
        if n not in valid:
            raise ConfigError(f"cannot freeze unknown layer {n!r}; known: {sorted(valid)}")
    model.frozen_prefixes = tuple(_prefix_for(n) for n in names)
    model.cfg.frozen = names


def build_model(cfg: ModelConfig, rng: np.random.Generator) -> Model:
    """Initialize all parameters (uniform fan-in scaling; LSTM forget bias 1)."""
    dtype = cfg.np_dtype
    encoder_feature_geometry(cfg)  # validates the schedule against the resolution
    params: dict[str, Tensor] = {}

    def conv_param(name: str, in_ch: int, stage: EncoderStage):
        fan_in = in_ch * stage.kernel * stage.kernel
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, (stage.out_channels, in_ch, stage.kernel, stage.kernel))
        params[f"enc.{name}.w"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"enc.{name}.b"] = Tensor(np.zeros(stage.out_channels, dtype=dtype), requires_grad=True)

    in_ch = 3 if cfg.encoder_kind == "flownetc" else 6
    for stage in cfg.schedule:
        if stage.name == "conv_redir":
            if cfg.encoder_kind == "flownetc":
                conv_param(stage.name, cfg.stage("conv_3").out_channels, stage)
            continue
        if stage.name == "conv_3_1" and cfg.encoder_kind == "flownetc":
            in_ch = layers.correlation_channels(cfg.corr_max_disp, cfg.corr_stride)
            in_ch += cfg.stage("conv_redir").out_channels
        conv_param(stage.name, in_ch, stage)
        in_ch = stage.out_channels

    feature_width = encoder_feature_width(cfg)
    rnn: list = []
    rnn_in = feature_width
    for li in range(cfg.rnn_layers):
        if cfg.rnn_cell == "bilstm":
            layer = layers.init_bilstm_layer(rnn_in, cfg.rnn_hidden, rng, dtype=dtype)
            for dname, p in (("fwd", layer.forward_direction), ("bwd", layer.backward_direction)):
                for pname, t in p.tensors().items():
                    params[f"rnn.l{li + 1}.{dname}.{pname}"] = t
            rnn_in = 2 * cfg.rnn_hidden
        else:
            layer = layers.init_lstm_params(rnn_in, cfg.rnn_hidden, rng, dtype=dtype)
            for pname, t in layer.tensors().items():
                params[f"rnn.l{li + 1}.fwd.{pname}"] = t
            rnn_in = cfg.rnn_hidden
        rnn.append(layer)

    head_out = cfg.codec.K if cfg.head == "ordinal" else 1
    bound = 1.0 / np.sqrt(rnn_in)
    params["head.w"] = Tensor(
        rng.uniform(-bound, bound, (head_out, rnn_in)).astype(dtype), requires_grad=True
    )
    params["head.b"] = Tensor(np.zeros(head_out, dtype=dtype), requires_grad=True)

    model = Model(cfg=cfg, params=params, rnn=rnn)
    if cfg.frozen:
        freeze_layers(model, cfg.frozen)
    return model


# ---------------------------------------------------------------------------
# forward passes

def _conv_stage(model: Model, name: str, x: Tensor) -> Tensor:
    stage = model.cfg.stage(name)
    out = T.conv2d(
        x,
        model.params[f"enc.{name}.w"],
        model.params[f"enc.{name}.b"],
        stride=stage.stride,
        padding=stage.padding,
    )
    return T.leaky_relu(out, model.cfg.leaky_slope)


def encoder_forward_batch(model: Model, frames_a: Tensor, frames_b: Tensor) -> Tensor:
    """[P,3,H,W] frame pairs -> [P,F] feature rows."""
    cfg = model.cfg
    p = frames_a.shape[0]
    if cfg.encoder_kind == "flownetc":
        x = T.concat([frames_a, frames_b], axis=0)  # one stem pass for both branches
        for name in STEM:
            x = _conv_stage(model, name, x)
        branch_a = T.narrow(x, 0, 0, p)
        branch_b = T.narrow(x, 0, p, p)
        corr = layers.correlation(branch_a, branch_b, cfg.corr_max_disp, cfg.corr_stride)
        redir = _conv_stage(model, "conv_redir", branch_a)
        x = T.concat([corr, redir], axis=1)
    else:
        x = T.concat([frames_a, frames_b], axis=1)  # channel-stacked input
        for name in STEM:
            x = _conv_stage(model, name, x)
    for stage in cfg.schedule:
        if stage.name in STEM or stage.name == "conv_redir":
            continue
        x = _conv_stage(model, stage.name, x)
    return T.reshape(x, (p, x.shape[1] * x.shape[2] * x.shape[3]))


def encoder_forward(model: Model, frame_a: Tensor, frame_b: Tensor) -> Tensor:
    """Single pair [3,H,W] x2 -> flattened feature vector [F]."""
    w, h = model.cfg.resolution
    for f in (frame_a, frame_b):
        if f.shape != (3, h, w):
            raise DimensionError(
                f"encoder_forward: frame shape {f.shape} does not match configured (3, {h}, {w})"
            )
    fa = T.reshape(frame_a, (1, 3, h, w))
    fb = T.reshape(frame_b, (1, 3, h, w))
    feats = encoder_forward_batch(model, fa, fb)
    return T.reshape(feats, (feats.shape[1],))


def _dropout_rows(x: Tensor, rate: float, sample_rngs, dtype) -> Tensor:
    """Per-sample inverted-dropout masks on a [B,W] activation block."""
    if rate == 0.0 or sample_rngs is None:
        return x
    rows = [layers.dropout_mask(rng, (x.shape[1],), rate, np.dtype(dtype)) for rng in sample_rngs]
    return T.mul(x, Tensor(np.stack(rows)))


def rnn_forward(model: Model, step_inputs: list[Tensor], training: bool, sample_rngs=None) -> Tensor:
    """Run the recurrent layers over per-step [B,F] inputs; return the last
    step's output [B, rnn_out_width]. Dropout (training only) is applied
    after each recurrent layer on the concatenated outputs."""
    cfg = model.cfg
    rate = cfg.dropout_rate if training else 0.0
    seq = step_inputs
    if cfg.dropout_rnn_input and rate > 0.0:
        seq = [_dropout_rows(x, rate, sample_rngs, cfg.np_dtype) for x in seq]
    for layer in model.rnn:
        if cfg.rnn_cell == "bilstm":
            seq = layers.bilstm_forward(seq, layer)
        else:
            seq = layers.lstm_forward(seq, layer)
        if rate > 0.0:
            seq = [_dropout_rows(x, rate, sample_rngs, cfg.np_dtype) for x in seq]
    return seq[-1]


def forward_batch(model: Model, frames: np.ndarray, training: bool = False, sample_rngs=None) -> Tensor:
    """Window batch [B,T,3,H,W] -> ordinal digits [B,K] or distances [B].

    ``sample_rngs`` supplies one Generator per sample for dropout so masks
    depend only on (seed, epoch, sample), never on batch composition.
    """
    cfg = model.cfg
    if frames.ndim != 5 or frames.shape[1] != cfg.window:
        raise ContractError(
            f"forward_batch: expected [B,{cfg.window},3,H,W] frames, got {frames.shape}"
        )
    w, h = cfg.resolution
    if frames.shape[2:] != (3, h, w):
        raise DimensionError(
            f"forward_batch: frame geometry {frames.shape[2:]} != (3, {h}, {w})"
        )
    if training and sample_rngs is not None and len(sample_rngs) != frames.shape[0]:
        raise ContractError("forward_batch: need one rng per sample")
    b, t = frames.shape[0], frames.shape[1]
    steps = t - 1
    # step-major pair stacking: pair row s*B + n holds (frame s, frame s+1) of sample n
    a_all = np.ascontiguousarray(frames[:, :-1].transpose(1, 0, 2, 3, 4).reshape(steps * b, 3, h, w))
    b_all = np.ascontiguousarray(frames[:, 1:].transpose(1, 0, 2, 3, 4).reshape(steps * b, 3, h, w))
    feats = encoder_forward_batch(model, Tensor(a_all), Tensor(b_all))
    step_inputs = [T.narrow(feats, 0, s * b, b) for s in range(steps)]
    last = rnn_forward(model, step_inputs, training, sample_rngs if training else None)
    logits = layers.linear(last, model.params["head.w"], model.params["head.b"])
    if cfg.head == "ordinal":
        return T.logistic(logits)
    return T.reshape(T.softplus(logits), (b,))


def forward(model: Model, sample, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Single SequenceSample -> [K] ordinal digit probabilities (or scalar)."""
    cfg = model.cfg
    if len(sample.frames) != cfg.window:
        raise ContractError(
            f"forward: sample has {len(sample.frames)} frames, model expects {cfg.window} "
            f"({cfg.window - 1} pairs)"
        )
    frames = np.stack(sample.frames).astype(cfg.np_dtype)[None]
    out = forward_batch(model, frames, training=training,
                        sample_rngs=[rng] if (training and rng is not None) else None)
    if cfg.head == "ordinal":
        return T.reshape(out, (out.shape[1],))
    return out


# ---------------------------------------------------------------------------
# checkpoints

def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr)
    tag = _TAG_FOR[data.dtype]
    encoded = name.encode()
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", tag, data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.astype(data.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError("truncated checkpoint file")
    return buf


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode()
    tag, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if tag not in _DTYPE_TAGS:
        raise ParseError(f"unknown dtype tag {tag} for tensor {name!r}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    dtype = np.dtype(_DTYPE_TAGS[tag]).newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(_DTYPE_TAGS[tag])
    return name, arr


def save_checkpoint(
    model: Model,
    optimizer_state,
    path: str,
    run_config: RunConfig,
    epoch: int = 0,
    extra_meta: dict | None = None,
) -> None:
    """Atomically write model + optimizer state + config to ``path``."""
    config_text = run_config.to_text()
    meta = {
        "epoch": int(epoch),
        "param_count": model.param_count(),
        "frozen": list(model.cfg.frozen),
        "adam_step": int(optimizer_state.step) if optimizer_state is not None else 0,
    }
    if extra_meta:
        meta.update(extra_meta)
    tensors: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in model.params.items()]
    if optimizer_state is not None:
        tensors += [(f"adam.m.{n}", a) for n, a in optimizer_state.m.items()]
        tensors += [(f"adam.v.{n}", a) for n, a in optimizer_state.v.items()]

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(hashlib.sha256(config_text.encode()).digest())
        blob = config_text.encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        meta_blob = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)
    os.replace(tmp, path)


@dataclass
class CheckpointBundle:
    run_config: RunConfig
    model: Model
    meta: dict
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int


def load_checkpoint(path: str) -> CheckpointBundle:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not an odonet checkpoint (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(found=version, expected=CHECKPOINT_VERSION)
        digest = _read_exact(fh, 32)
        (clen,) = struct.unpack("<I", _read_exact(fh, 4))
        config_text = _read_exact(fh, clen).decode()
        if hashlib.sha256(config_text.encode()).digest() != digest:
            raise ParseError(f"{path}: config digest mismatch; file is corrupt")
        (mlen,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, mlen).decode())
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        stored: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = _read_tensor(fh)
            stored[name] = arr

    run_config = RunConfig.from_text(config_text)
    cfg = model_config_from_run(run_config)
    model = build_model(cfg, np.random.default_rng(0))
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    seen = set()
    for name, arr in stored.items():
        if name.startswith("adam.m."):
            adam_m[name[7:]] = arr.astype(cfg.np_dtype)
            continue
        if name.startswith("adam.v."):
            adam_v[name[7:]] = arr.astype(cfg.np_dtype)
            continue
        if name not in model.params:
            raise ParseError(f"{path}: tensor {name!r} does not exist in the configured model")
        if model.params[name].shape != arr.shape:
            raise ParseError(
                f"{path}: tensor {name!r} has shape {arr.shape}, model expects {model.params[name].shape}"
            )
        model.params[name].data = arr.astype(cfg.np_dtype)
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise ParseError(f"{path}: checkpoint is missing tensors {sorted(missing)[:4]}...")
    return CheckpointBundle(
        run_config=run_config,
        model=model,
        meta=meta,
        adam_m=adam_m,
        adam_v=adam_v,
        adam_step=int(meta.get("adam_step", 0)),
    )


def import_encoder_weights(model: Model, path: str) -> list[str]:
    """Load encoder tensors from a raw named-tensor dump (same block format
    as checkpoints, without header): transfer-learning hook.

    Returns the names that were loaded. Tensors whose names do not start
    with 'enc.' are ignored; shape mismatches raise.
    """
    loaded = []
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            name, arr = _read_tensor(fh)
            if not name.startswith("enc."):
                continue
            if name not in model.params:
                raise ParseError(f"{path}: unknown encoder tensor {name!r}")
            if model.params[name].shape != arr.shape:
                raise ParseError(
                    f"{path}: tensor {name!r} shape {arr.shape} != {model.params[name].shape}"
                )
            model.params[name].data = arr.astype(model.cfg.np_dtype)
            loaded.append(name)
    return loaded
