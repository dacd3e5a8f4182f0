"""Desk-scale training: optimiser, schedule, augmentation and the synthetic tone task."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .encoder import EncoderConfig, load_params, read_checkpoint, reduced_config, write_checkpoint
from .errors import TrainingDiverged, UsageError
from .frontend import SAMPLE_RATE, AcousticFeatures, Waveform, log_mel_filterbank
from .numerics import GradTape, Tensor
from .transducer import BLANK_SYMBOL, DecoderConfig, TransducerModel, Vocab, greedy_decode

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    warmup_steps: int = 15000
    peak_lr: float = 0.0025
    l2_weight: float = 1e-6
    freq_mask_max_width: int = 27
    freq_masks: int = 1
    time_masks: int = 10
    time_mask_max_fraction: float = 0.05
    weight_noise_std: float = 0.075
    weight_noise_start_step: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    batch_size: int = 16
    max_steps: int = 10000
    eval_interval: int = 250
    target_error: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1 or self.peak_lr <= 0:
            raise UsageError("warmup_steps and peak_lr must be positive")
        if not 0.0 <= self.time_mask_max_fraction <= 1.0:
            raise UsageError(f"time_mask_max_fraction must lie in [0, 1], got {self.time_mask_max_fraction}")
        if self.l2_weight < 0 or self.weight_noise_std < 0:
            raise UsageError("l2_weight and weight_noise_std must be non-negative")
        if self.batch_size < 1 or self.max_steps < 1 or self.eval_interval < 1:
            raise UsageError("batch_size, max_steps and eval_interval must be positive")


@dataclass
class ToyTaskSpec:
    num_tones: int = 8
    tone_length: float = 0.10
    gap_length: float = 0.04
    min_tokens: int = 1
    max_tokens: int = 6
    utterance_seconds: float = 1.0
    snr_db: float = 20.0
    num_train: int = 2000
    num_dev: int = 200
    seed: int = 1234

    def frequencies(self) -> np.ndarray:
        """Geometrically spaced tones between 300 Hz and 3.4 kHz."""
        return 300.0 * (3400.0 / 300.0) ** (np.arange(self.num_tones) / max(self.num_tones - 1, 1))

    def vocab(self) -> Vocab:
        return Vocab([BLANK_SYMBOL] + [f"tone{i}" for i in range(self.num_tones)])


# -- schedule and optimiser ------------------------------------------------------

def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``peak_lr`` then inverse-square-root decay."""
    if step < 1:
        raise UsageError(f"step must be >= 1, got {step}")
    w = cfg.warmup_steps
    return cfg.peak_lr * min(step / w, math.sqrt(w / step))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction and an L2 term ``l2_weight * weight``."""
    state.step += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if cfg.l2_weight:
            g = g + cfg.l2_weight * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# -- augmentation -------------------------------------------------------------------

def specaugment(features, cfg: TrainConfig, rng: np.random.Generator):
    """Frequency and time masking (zeros); no time warping.  Returns a new array."""
    frames = features.frames if isinstance(features, AcousticFeatures) else features
    out = np.array(frames, copy=True)
    T, F = out.shape[-2], out.shape[-1]
    for _ in range(cfg.freq_masks):
        width = int(rng.integers(0, min(cfg.freq_mask_max_width, F) + 1))
        start = int(rng.integers(0, F - width + 1))
        out[..., start:start + width] = 0.0
    max_width = int(math.floor(cfg.time_mask_max_fraction * T))
    for _ in range(cfg.time_masks):
        width = int(rng.integers(0, max_width + 1))
        start = int(rng.integers(0, T - width + 1))
        out[..., start:start + width, :] = 0.0
    if isinstance(features, AcousticFeatures):
        return AcousticFeatures(out, features.frame_shift, features.frame_length)
    return out


DECODER_PREFIXES = ("decoder.", "joint.")


def variational_noise(params: Mapping[str, Tensor], std: float, rng: np.random.Generator,
                      prefixes=DECODER_PREFIXES) -> dict[str, Tensor]:
    """Copy of ``params`` whose label-encoder and joint weight matrices carry N(0, std^2) noise.

    The originals are untouched, so gradients taken through the noisy copies
    can be applied to the clean weights.  Biases and vectors are not perturbed.
    """
    if std < 0:
        raise UsageError("variational noise std must be non-negative")
    if std == 0:
        return dict(params)
    out = dict(params)
    for name, p in params.items():
        if p.requires_grad and p.ndim >= 2 and name.startswith(prefixes):
            noise = rng.normal(0.0, std, p.shape)
            out[name] = nx.parameter(p.data + noise.astype(p.dtype), name=name)
    return out


# -- synthetic task ------------------------------------------------------------------

def synthesize_utterance(task: ToyTaskSpec, rng: np.random.Generator):
    """Random tone sequence; returns ``(waveform, token ids)`` with ids in 1..num_tones."""
    n = int(rng.integers(task.min_tokens, task.max_tokens + 1))
    tokens = rng.integers(0, task.num_tones, n)
    total = int(round(task.utterance_seconds * SAMPLE_RATE))
    tone = int(round(task.tone_length * SAMPLE_RATE))
    gap = int(round(task.gap_length * SAMPLE_RATE))
    slack = total - n * (tone + gap)
    if slack < 0:
        raise UsageError("utterance_seconds too short for max_tokens tones")
    signal = np.zeros(total)
    pos = int(rng.integers(0, slack + 1))
    t = np.arange(tone) / SAMPLE_RATE
    ramp = np.minimum(1.0, np.minimum(np.arange(tone), np.arange(tone)[::-1]) / 80.0)
    freqs = task.frequencies()
    for k in tokens:
        amp = rng.uniform(0.2, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        signal[pos:pos + tone] = amp * ramp * np.sin(2 * np.pi * freqs[k] * t + phase)
        pos += tone + gap
    tone_power = np.mean(signal[signal != 0] ** 2) if np.any(signal) else 1e-4
    noise_std = math.sqrt(tone_power / (10.0 ** (task.snr_db / 10.0)))
    signal += rng.normal(0.0, noise_std, total)
    return Waveform(np.clip(signal, -1.0, 1.0), SAMPLE_RATE), [int(k) + 1 for k in tokens]


def make_dataset(task: ToyTaskSpec, split: str):
    """Features ``[N, T, 80]`` (float32) and label lists for ``split`` in {train, dev}."""
    count = task.num_train if split == "train" else task.num_dev
    split_id = {"train": 0, "dev": 1}[split]
    feats, labels = [], []
    for i in range(count):
        rng = np.random.default_rng([task.seed, split_id, i])
        wave, tokens = synthesize_utterance(task, rng)
        feats.append(log_mel_filterbank(wave).frames.astype(np.float32))
        labels.append(tokens)
    return np.stack(feats), labels


def pad_labels(batch: list[list[int]]):
    lengths = np.array([len(y) for y in batch], dtype=np.int64)
    padded = np.ones((len(batch), max(lengths.max(), 0)), dtype=np.int64)
    for b, y in enumerate(batch):
        padded[b, :len(y)] = y
    return padded, lengths


def edit_distance(ref, hyp) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def token_error_rate(model: TransducerModel, feats: np.ndarray, labels, batch_size: int = 100) -> float:
    errors = total = 0
    for start in range(0, len(feats), batch_size):
        with nx.no_grad():
            enc = model.encode(feats[start:start + batch_size], train=False)
        for b, ref in enumerate(labels[start:start + batch_size]):
            hyp = greedy_decode(Tensor(enc.data[b]), model)
            errors += edit_distance(ref, hyp)
            total += len(ref)
    return errors / max(total, 1)


# -- training loop -----------------------------------------------------------------------

def default_toy_setup() -> dict:
    """Model and training settings used by ``train-toy`` when no config file is given."""
    return {
        "encoder": reduced_config(alpha=0.125).to_dict(),
        "decoder": {"embed_dim": 32, "hidden": 64, "joint_dim": 64},
        "task": asdict(ToyTaskSpec()),
        "train": asdict(TrainConfig(
            warmup_steps=400, peak_lr=0.0025, freq_mask_max_width=27, time_masks=2, weight_noise_std=0.01,
            weight_noise_start_step=1000, batch_size=16, max_steps=3000, eval_interval=250, seed=7)),
    }


def build_setup(overrides: Mapping | None = None):
    """Merge ``overrides`` (same section layout as :func:`default_toy_setup`) into the defaults."""
    setup = default_toy_setup()
    for section, values in (overrides or {}).items():
        if section not in setup:
            raise UsageError(f"unknown config section {section!r}")
        if section == "encoder":
            setup[section] = dict(values)
        else:
            setup[section].update(values)
    task = ToyTaskSpec(**setup["task"])
    train = TrainConfig(**setup["train"])
    encoder = EncoderConfig.from_dict(setup["encoder"])
    decoder = DecoderConfig(vocab_size=task.num_tones + 1, **setup["decoder"])
    return task, encoder, decoder, train


@dataclass
class TrainResult:
    model: TransducerModel
    metrics: list[dict]
    checkpoint: Path | None


def train_toy(task: ToyTaskSpec, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig,
              cfg: TrainConfig, out_dir=None, data=None) -> TrainResult:
    """Train the full pipeline on synthetic tone sequences.

    Writes ``model.cnck``, ``model.json``, ``vocab.txt`` and ``metrics.jsonl``
    into ``out_dir`` when given.  ``data`` may carry precomputed
    ``(train_feats, train_labels, dev_feats, dev_labels)``.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    vocab = task.vocab()
    if decoder_cfg.vocab_size != len(vocab):
        raise UsageError(f"decoder vocab_size {decoder_cfg.vocab_size} != task vocabulary {len(vocab)}")
    if data is None:
        data = make_dataset(task, "train") + make_dataset(task, "dev")
    train_x, train_y, dev_x, dev_y = data

    model = TransducerModel.create(encoder_cfg, decoder_cfg, seed=cfg.seed, vocab=vocab, dtype=np.float32)
    trainable = model.trainable()
    names = list(trainable)
    state = AdamState()
    metrics: list[dict] = []
    metrics_fh = open(out_dir / "metrics.jsonl", "w") if out_dir is not None else None
    order = np.array([], dtype=np.int64)
    cursor = epoch = 0
    running = []
    try:
        for step in range(1, cfg.max_steps + 1):
            if cursor + cfg.batch_size > len(order):
                order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(train_x))
                cursor, epoch = 0, epoch + 1
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            batch = np.stack([
                specaugment(train_x[i], cfg, np.random.default_rng([cfg.seed, 2, step, int(i)])) for i in idx
            ])
            labels, lengths = pad_labels([train_y[i] for i in idx])
            params = model.params
            if cfg.weight_noise_std > 0 and step > cfg.weight_noise_start_step:
                params = variational_noise(params, cfg.weight_noise_std, np.random.default_rng([cfg.seed, 3, step]))
            with GradTape() as tape:
                loss = model.loss(batch, labels, lengths, train=True, params=params)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            grads = tape.gradient(loss, [params[n] for n in names])
            lr = lr_schedule(step, cfg)
            adam_step(trainable, dict(zip(names, grads)), state, lr, cfg)
            running.append(value)
            if step % cfg.eval_interval == 0 or step == cfg.max_steps:
                ter = token_error_rate(model, dev_x, dev_y)
                record = {"step": step, "lr": lr, "train_loss": float(np.mean(running)),
                          "dev_token_error_rate": ter}
                running = []
                metrics.append(record)
                log.info("step %d lr %.6f loss %.4f dev TER %.4f", step, lr, record["train_loss"], ter)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record) + "\n")
                    metrics_fh.flush()
                if cfg.target_error is not None and ter <= cfg.target_error:
                    break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    checkpoint = None
    if out_dir is not None:
        checkpoint = out_dir / "model.cnck"
        save_model(model, checkpoint)
        vocab.save(out_dir / "vocab.txt")
    return TrainResult(model, metrics, checkpoint)


# -- persistence -----------------------------------------------------------------------------

def model_config_path(checkpoint) -> Path:
    return Path(checkpoint).with_suffix(".json")


def save_model(model: TransducerModel, checkpoint) -> None:
    write_checkpoint(checkpoint, model.params)
    meta = {"encoder": model.encoder_config.to_dict(), "decoder": model.decoder_config.to_dict()}
    model_config_path(checkpoint).write_text(json.dumps(meta, indent=2) + "\n")


def load_model(checkpoint, config_path=None, vocab: Vocab | None = None) -> TransducerModel:
    meta = json.loads(Path(config_path or model_config_path(checkpoint)).read_text())
    enc = EncoderConfig.from_dict(meta["encoder"])
    dec = DecoderConfig(**meta["decoder"])
    model = TransducerModel.create(enc, dec, seed=0, vocab=vocab, dtype=np.float32)
    load_params(read_checkpoint(checkpoint), model.params)
    return model


def dataclass_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
