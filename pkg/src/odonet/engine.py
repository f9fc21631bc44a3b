"""Training engine: Adam with weight decay, recurrent-gradient clipping,
gradient accumulation to a large effective batch, the epoch loop, and
evaluation (RMSE / Acc / AccDev plus per-window error traces).

Determinism contract: all randomness is derived statelessly from the run
seed via (purpose, epoch, sample) keys, micro-batch gradients are summed
in fixed order, and every artifact except the epoch log's wall-seconds
column is byte-reproducible for identical config + seed.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import codec as codec_mod
from . import dataio, losses, report, rng
from .codec import DistanceCodec, round_half_away
from .config import RunConfig
from .errors import ConfigError, ContractError, DomainError, NumericError
from .losses import LossConfig
from .model import (
    Model,
    build_model,
    forward_batch,
    load_checkpoint,
    model_config_from_run,
    save_checkpoint,
)
from .tensor import ComputationTape, Tensor
from .tensor import backward as tape_backward
import odonet.tensor as T


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    """Adam moments plus hyperparameters; moments are shaped like params."""

    lr: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.001
    decoupled: bool = False
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optimizer(model: Model, **hyper) -> OptimizerState:
    state = OptimizerState(**hyper)
    for name, p in model.params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(model: Model, state: OptimizerState) -> None:
    """Classic bias-corrected Adam; weight decay defaults to coupled L2
    (gradient += wd * param before the moments). Frozen layers skip."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    frozen = model.frozen_prefixes
    for name, p in model.params.items():
        if frozen and name.startswith(frozen):
            continue
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}", op="adam_step")
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - update
        if state.weight_decay and state.decoupled:
            p.data = p.data - state.lr * state.weight_decay * p.data


def clip_lstm_gradients(model: Model, limit: float = 1.0, mode: str = "element") -> None:
    """Clamp recurrent-head gradients; encoder and head are untouched."""
    if mode not in ("element", "norm"):
        raise ConfigError(f"clip mode {mode!r} unknown (element | norm)")
    rnn_grads = [p.grad for n, p in model.params.items() if n.startswith("rnn.") and p.grad is not None]
    if not rnn_grads:
        return
    if mode == "element":
        for g in rnn_grads:
            np.clip(g, -limit, limit, out=g)
    else:
        total = float(sum(float((g.astype(np.float64) ** 2).sum()) for g in rnn_grads))
        norm = np.sqrt(total)
        if norm > limit:
            scale = limit / norm
            for g in rnn_grads:
                g *= g.dtype.type(scale)


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    """One micro batch ready for the model."""

    uids: list[int]
    frames: np.ndarray  # [B,T,3,H,W] in model dtype
    gts: list[float]
    classes: list[int]
    dropout_rngs: list[np.random.Generator] | None = None

    def __len__(self) -> int:
        return len(self.uids)


def build_batch(
    store: dataio.SampleStore,
    indices,
    dtype,
    seed: int | None = None,
    epoch: int = 0,
    flip_probability: float = 0.0,
    training: bool = False,
) -> Batch:
    frames = []
    for i in indices:
        flip = False
        if training and flip_probability > 0.0 and seed is not None:
            flip = rng.generator(seed, "augment", epoch, int(i)).random() < flip_probability
        frames.append(store.normalized(int(i), flip=flip))
    drng = None
    if training and seed is not None:
        drng = [rng.generator(seed, "dropout", epoch, int(i)) for i in indices]
    return Batch(
        uids=[int(i) for i in indices],
        frames=np.stack(frames).astype(dtype, copy=False),
        gts=[store.gt(int(i)) for i in indices],
        classes=[store.meter_class(int(i)) for i in indices],
        dropout_rngs=drng,
    )


def _micro_loss(model: Model, batch: Batch, loss_cfg: LossConfig, codec: DistanceCodec,
                scale: float, training: bool = True) -> float:
    """Forward + scaled backward for one micro batch; grads accumulate."""
    with ComputationTape():
        preds = forward_batch(model, batch.frames, training=training,
                              sample_rngs=batch.dropout_rngs)
        if model.cfg.head == "ordinal":
            targets = np.stack([codec_mod.encode(g, codec) for g in batch.gts])
            loss = losses.batch_loss(
                preds, Tensor(targets.astype(model.cfg.np_dtype)), batch.classes, loss_cfg
            )
        else:
            gts = Tensor(np.asarray(batch.gts, dtype=model.cfg.np_dtype))
            loss = losses.mse_regression_loss(preds, gts)
        scaled = T.mul(loss, scale)
        tape_backward(scaled)
        return scaled.item()


def accumulate_step(
    model: Model,
    micro_batches: list[Batch],
    loss_cfg: LossConfig,
    opt_state: OptimizerState,
    codec: DistanceCodec,
    clip_limit: float = 1.0,
    clip_mode: str = "element",
) -> float:
    """Zero grads, sum scaled micro-batch gradients, clip, one Adam step.

    Micro losses are scaled by micro_size/effective_size so the summed
    gradient equals the effective-batch mean gradient exactly; the
    returned value is the effective-batch mean loss.
    """
    if not micro_batches:
        raise ContractError("accumulate_step: empty micro batch list")
    effective = sum(len(b) for b in micro_batches)
    model.zero_grads()
    total = 0.0
    for batch in micro_batches:
        total += _micro_loss(model, batch, loss_cfg, codec, scale=len(batch) / effective)
    if not np.isfinite(total):
        uids = [u for b in micro_batches for u in b.uids]
        raise NumericError(f"non-finite loss for samples {uids}", op="accumulate_step")
    clip_lstm_gradients(model, clip_limit, clip_mode)
    adam_step(model, opt_state)
    return total


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class WindowRecord:
    sequence_id: str
    start: int
    gt: float
    prediction: float
    error: float  # prediction - gt; positive means overshoot


@dataclass
class MetricsReport:
    rmse: float
    acc: float
    acc_dev: float
    n_samples: int
    records: list[WindowRecord]

    def __post_init__(self):
        if not (0.0 <= self.acc <= self.acc_dev <= 1.0) or self.rmse < 0:
            raise ContractError(
                f"inconsistent metrics: rmse={self.rmse} acc={self.acc} acc_dev={self.acc_dev}"
            )


def predict_batch(model: Model, frames: np.ndarray, codec: DistanceCodec) -> list[float]:
    """Eval-mode distances for a [B,T,3,H,W] window batch."""
    with ComputationTape():
        out = forward_batch(model, frames, training=False)
        if model.cfg.head == "ordinal":
            return [codec_mod.decode_distance(row, codec) for row in out.data]
        return [float(v) for v in out.data]


def metrics_from_records(records: list[WindowRecord], accdev_raw_meters: bool = False) -> MetricsReport:
    """Aggregate per-window records: RMSE over raw meter errors, Acc on
    whole-meter rounded classes, AccDev within one meter class (or within
    one raw meter when accdev_raw_meters). Records are re-sorted by
    (sequence, start) so the result is invariant to input ordering."""
    if not records:
        raise DomainError("metrics_from_records: no records")
    records = sorted(records, key=lambda r: (r.sequence_id, r.start))
    errors = np.array([r.error for r in records], dtype=np.float64)
    rmse = float(np.sqrt(np.mean(errors**2)))
    hits = 0
    dev_hits = 0
    for r in records:
        pc, gc = round_half_away(r.prediction), round_half_away(r.gt)
        close = pc == gc
        hits += close
        if accdev_raw_meters:
            dev_hits += close or abs(r.prediction - r.gt) <= 1.0
        else:
            dev_hits += abs(pc - gc) <= 1
    n = len(records)
    return MetricsReport(
        rmse=rmse, acc=hits / n, acc_dev=dev_hits / n, n_samples=n, records=records
    )


def evaluate(
    model: Model,
    store: dataio.SampleStore,
    codec: DistanceCodec,
    batch_size: int = 16,
    accdev_raw_meters: bool = False,
) -> MetricsReport:
    """Predict every window (forward -> binarize -> decode -> distance for
    the ordinal head; raw scalar for regression) and aggregate metrics."""
    if len(store) == 0:
        raise DomainError("evaluate: empty dataset")
    records = []
    for lo in range(0, len(store), batch_size):
        idx = range(lo, min(lo + batch_size, len(store)))
        batch = build_batch(store, idx, model.cfg.np_dtype)
        preds = predict_batch(model, batch.frames, codec)
        for i, pred in zip(idx, preds):
            d = store.descriptors[i]
            records.append(
                WindowRecord(
                    sequence_id=d.sequence_id,
                    start=d.start,
                    gt=d.gt_distance,
                    prediction=pred,
                    error=pred - d.gt_distance,
                )
            )
    return metrics_from_records(records, accdev_raw_meters=accdev_raw_meters)


def error_trace(model: Model, store: dataio.SampleStore, codec: DistanceCodec,
                batch_size: int = 16) -> list[tuple[int, float]]:
    """Signed error per window start frame for one stride-1 sequence."""
    seqs = {d.sequence_id for d in store.descriptors}
    if len(seqs) != 1:
        raise ContractError(f"error_trace: windows span multiple sequences {sorted(seqs)}")
    starts = sorted(d.start for d in store.descriptors)
    if any(b - a != 1 for a, b in zip(starts, starts[1:])):
        raise ContractError("error_trace: windows must have stride 1")
    rep = evaluate(model, store, codec, batch_size=batch_size)
    return [(r.start, r.error) for r in rep.records]


def flip_sensitivity(model: Model, store: dataio.SampleStore, codec: DistanceCodec,
                     limit: int = 64) -> float:
    """Mean |prediction(x) - prediction(mirror(x))| over up to `limit`
    windows; a diagnostic for how well flip augmentation symmetrized the
    model, not an asserted invariant."""
    n = min(limit, len(store))
    diffs = []
    for lo in range(0, n, 16):
        idx = list(range(lo, min(lo + 16, n)))
        plain = build_batch(store, idx, model.cfg.np_dtype)
        preds = predict_batch(model, plain.frames, codec)
        mirrored = np.ascontiguousarray(plain.frames[..., ::-1])
        preds_m = predict_batch(model, mirrored, codec)
        diffs.extend(abs(a - b) for a, b in zip(preds, preds_m))
    return float(np.mean(diffs))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    epochs_run: int
    final_metrics: MetricsReport | None
    out_dir: str
    produced: list[str]


def _load_datasets(cfg: RunConfig) -> tuple[list, list]:
    kind = cfg.get("dataset", "kind")
    window = int(cfg.get("dataset", "window"))
    stride = int(cfg.get("dataset", "stride"))
    if kind == "synthetic":
        train_dir = str(cfg.get("dataset", "train_dir"))
        val_dir = str(cfg.get("dataset", "val_dir"))
        if not train_dir or not val_dir:
            raise ConfigError("[dataset] train_dir and val_dir are required for synthetic data")
        return dataio.load_synth_dataset(train_dir), dataio.load_synth_dataset(val_dir)
    root = str(cfg.get("dataset", "kitti_root")) or os.environ.get("ODONET_KITTI_ROOT", "")
    if not root:
        raise ConfigError("[dataset] kitti_root not set and ODONET_KITTI_ROOT undefined")
    split = dataio.split_preset(str(cfg.get("dataset", "split")))
    d_max = float(cfg.get("codec", "d_max"))
    train, val = [], []
    for seq in split.train_sequences:
        wins, _ = dataio.kitti_sequence_windows(root, seq, window=window, stride=stride, d_max=d_max)
        train.extend(wins)
    for seq in split.test_sequences:
        wins, _ = dataio.kitti_sequence_windows(root, seq, window=window, stride=stride, d_max=d_max)
        val.extend(wins)
    return train, val


def _loss_config(cfg: RunConfig, train_desc) -> LossConfig:
    kind = str(cfg.get("loss", "kind"))
    weight_range = (float(cfg.get("loss", "weight_low")), float(cfg.get("loss", "weight_high")))
    cw = None
    if kind != "mse_regression" and bool(cfg.get("loss", "class_balance")):
        cw = losses.class_weights(dataio.meter_histogram(train_desc), weight_range)
    return LossConfig(
        kind=kind,
        gamma=float(cfg.get("loss", "gamma")),
        weight_range=weight_range,
        class_weights=cw,
        epsilon=float(cfg.get("loss", "epsilon")),
    )


def train(cfg: RunConfig, resume: str | None = None, log_fn=print) -> TrainResult:
    """Full training run driven by a RunConfig; returns artifact paths.

    Writes under [run] out_dir: config.ini (resolved), class_weights.txt,
    epochs.csv, checkpoint_last.bin / checkpoint_best.bin, final metrics
    CSVs and trace SVG, and MANIFEST.txt listing everything produced.
    """
    t_start = time.monotonic()
    out_dir = str(cfg.get("run", "out_dir"))
    os.makedirs(out_dir, exist_ok=True)
    produced: list[str] = []

    def emit(path: str, text: str) -> str:
        report.atomic_write_text(path, text)
        produced.append(path)
        return path

    seed = int(cfg.get("run", "seed"))
    codec = cfg.codec_config()
    train_desc, val_desc = _load_datasets(cfg)  # ingestion failures surface before epoch 0
    loss_cfg = _loss_config(cfg, train_desc)

    emit(os.path.join(out_dir, "config.ini"), cfg.to_text())
    if loss_cfg.class_weights is not None:
        emit(os.path.join(out_dir, "class_weights.txt"), loss_cfg.class_weights.to_text())

    model_cfg = model_config_from_run(cfg)
    dtype = model_cfg.np_dtype
    resolution = model_cfg.resolution
    train_store = dataio.SampleStore(train_desc, resolution, dtype=dtype)
    val_store = dataio.SampleStore(val_desc, resolution, dtype=dtype)

    start_epoch = 0
    if resume:
        bundle = load_checkpoint(resume)
        if bundle.run_config.digest() != cfg.digest():
            raise ConfigError(
                "refusing to resume: checkpoint was produced by a different configuration "
                f"(digest {bundle.run_config.digest()[:12]} vs {cfg.digest()[:12]}); "
                "pass the original config or start a fresh run"
            )
        model = bundle.model
        opt = init_optimizer(
            model,
            lr=float(cfg.get("optimizer", "lr")),
            beta1=float(cfg.get("optimizer", "beta1")),
            beta2=float(cfg.get("optimizer", "beta2")),
            eps=float(cfg.get("optimizer", "eps")),
            weight_decay=float(cfg.get("optimizer", "weight_decay")),
            decoupled=bool(cfg.get("optimizer", "decoupled_weight_decay")),
        )
        for name in opt.m:
            if name in bundle.adam_m:
                opt.m[name] = bundle.adam_m[name]
                opt.v[name] = bundle.adam_v[name]
        opt.step = bundle.adam_step
        start_epoch = int(bundle.meta.get("epoch", 0))
    else:
        model = build_model(model_cfg, rng.generator(seed, "init"))
        opt = init_optimizer(
            model,
            lr=float(cfg.get("optimizer", "lr")),
            beta1=float(cfg.get("optimizer", "beta1")),
            beta2=float(cfg.get("optimizer", "beta2")),
            eps=float(cfg.get("optimizer", "eps")),
            weight_decay=float(cfg.get("optimizer", "weight_decay")),
            decoupled=bool(cfg.get("optimizer", "decoupled_weight_decay")),
        )

    epochs = int(cfg.get("train", "epochs"))
    batch_size = int(cfg.get("train", "batch_size"))
    micro = int(cfg.get("train", "micro_batch"))
    eval_interval = int(cfg.get("train", "eval_interval"))
    ckpt_interval = int(cfg.get("train", "checkpoint_interval"))
    patience = int(cfg.get("train", "early_stop_patience"))
    target_acc = float(cfg.get("train", "target_val_acc"))
    target_rmse = float(cfg.get("train", "target_val_rmse"))
    flip_p = float(cfg.get("train", "flip_probability"))
    accdev_raw = bool(cfg.get("train", "accdev_raw_meters"))
    clip_limit = float(cfg.get("optimizer", "clip_limit"))
    clip_mode = str(cfg.get("optimizer", "clip_mode"))

    log_path = os.path.join(out_dir, "epochs.csv")
    if start_epoch == 0 or not os.path.exists(log_path):
        with open(log_path, "w") as fh:
            fh.write("epoch,train_loss,val_rmse,val_acc,val_accdev,wall_seconds\n")
    produced.append(log_path)

    ckpt_last = os.path.join(out_dir, "checkpoint_last.bin")
    ckpt_best = os.path.join(out_dir, "checkpoint_best.bin")
    best_rmse = float("inf")
    stale = 0
    final_metrics: MetricsReport | None = None
    epochs_run = start_epoch
    n_train = len(train_store)

    for epoch in range(start_epoch, epochs):
        order = rng.generator(seed, "shuffle", epoch).permutation(n_train)
        loss_sum = 0.0
        seen = 0
        for lo in range(0, n_train, batch_size):
            chunk = order[lo : lo + batch_size]
            micros = [
                build_batch(train_store, chunk[m : m + micro], dtype,
                            seed=seed, epoch=epoch, flip_probability=flip_p, training=True)
                for m in range(0, len(chunk), micro)
            ]
            loss = accumulate_step(model, micros, loss_cfg, opt, codec,
                                   clip_limit=clip_limit, clip_mode=clip_mode)
            loss_sum += loss * len(chunk)
            seen += len(chunk)
        train_loss = loss_sum / max(seen, 1)

        metrics = None
        if eval_interval > 0 and ((epoch + 1) % eval_interval == 0 or epoch + 1 == epochs):
            metrics = evaluate(model, val_store, codec, accdev_raw_meters=accdev_raw)
            final_metrics = metrics
        wall = time.monotonic() - t_start
        with open(log_path, "a") as fh:
            if metrics is None:
                fh.write(f"{epoch},{train_loss!r},,,,{wall:.3f}\n")
            else:
                fh.write(
                    f"{epoch},{train_loss!r},{metrics.rmse!r},{metrics.acc!r},"
                    f"{metrics.acc_dev!r},{wall:.3f}\n"
                )
        log_fn(
            f"epoch {epoch}: loss {train_loss:.6f}"
            + (f" rmse {metrics.rmse:.4f} acc {metrics.acc:.4f} accdev {metrics.acc_dev:.4f}"
               if metrics else "")
        )
        epochs_run = epoch + 1
        save_checkpoint(model, opt, ckpt_last, cfg, epoch=epoch + 1,
                        extra_meta={"seed": seed})
        if ckpt_interval > 0 and (epoch + 1) % ckpt_interval == 0:
            path = os.path.join(out_dir, f"checkpoint_epoch{epoch + 1:04d}.bin")
            save_checkpoint(model, opt, path, cfg, epoch=epoch + 1, extra_meta={"seed": seed})
            produced.append(path)
        if metrics is not None:
            if metrics.rmse < best_rmse - 1e-12:
                best_rmse = metrics.rmse
                stale = 0
                save_checkpoint(model, opt, ckpt_best, cfg, epoch=epoch + 1,
                                extra_meta={"seed": seed})
            else:
                stale += 1
            hit_acc = target_acc > 0 and metrics.acc >= target_acc
            hit_rmse = target_rmse > 0 and metrics.rmse <= target_rmse
            want_acc = target_acc > 0
            want_rmse = target_rmse > 0
            if (want_acc or want_rmse) and (hit_acc or not want_acc) and (hit_rmse or not want_rmse):
                log_fn(f"targets reached at epoch {epoch}; stopping")
                break
            if patience > 0 and stale >= patience:
                log_fn(f"no val RMSE improvement for {patience} evals; stopping")
                break

    produced.append(ckpt_last)
    if os.path.exists(ckpt_best):
        produced.append(ckpt_best)
    if final_metrics is not None:
        produced.extend(report.write_metrics_report(final_metrics, out_dir, prefix="final"))
    emit(os.path.join(out_dir, "MANIFEST.txt"),
         "\n".join(sorted(set(os.path.relpath(p, out_dir) for p in produced))) + "\n")
    return TrainResult(
        checkpoint_path=ckpt_last,
        log_path=log_path,
        epochs_run=epochs_run,
        final_metrics=final_metrics,
        out_dir=out_dir,
        produced=produced,
    )
