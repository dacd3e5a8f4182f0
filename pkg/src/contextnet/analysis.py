"""Static cost accounting for encoder configurations.

Conventions:
  * one multiply-add counts as 2 FLOPs; bias adds count 1 per output element;
  * batch norm (inference, folded scale and shift plus the normalisation) counts
    4 per element, an activation 4 per element;
  * BN running statistics are buffers, not parameters;
  * lengths are real numbers, ``frames / cumulative_stride``, so that cost is
    exactly linear in audio duration;
  * the once-per-utterance squeeze-excite bottleneck of a global block is a
    constant, not a per-second cost, and is excluded;
  * the receptive field follows the convolution path only (global SE pooling
    would otherwise make it unbounded).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .encoder import BlockSpec, EncoderConfig, se_bottleneck
from .frontend import FRAME_SHIFT
from .transducer import DecoderConfig

BN_OPS = 4
ACT_OPS = 4

# Published reference figures shown next to the computed sweeps.
REFERENCE_PARAMS_M = {0.5: 10.8, 1.0: 31.4, 1.5: 65.4, 2.0: 112.7}
REFERENCE_GFLOPS = {("2x", 3): 2.131, ("2x", 5): 2.137, ("2x", 11): 2.156, ("2x", 23): 2.194,
                 ("8x", 3): 1.036, ("8x", 5): 1.040, ("8x", 11): 1.050, ("8x", 23): 1.071}


def reference_decoder(vocab_size: int = 1024) -> DecoderConfig:
    return DecoderConfig(vocab_size=vocab_size, embed_dim=640, hidden=640, joint_dim=640)


@dataclass
class BlockCost:
    block_id: int
    params: int
    flops: float
    output_length_factor: float
    receptive_field: int


@dataclass
class CostReport:
    total_params: int
    encoder_params: int
    decoder_params: int
    flops_per_second_audio: float
    receptive_field: int
    jump: int
    per_block: list[BlockCost] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_table(self) -> str:
        lines = [
            f"total params            {self.total_params:>14,d}",
            f"encoder params          {self.encoder_params:>14,d}",
            f"decoder params          {self.decoder_params:>14,d}",
            f"encoder GFLOPS / s audio{self.flops_per_second_audio / 1e9:>14.4f}",
            f"receptive field (frames){self.receptive_field:>14d}",
            f"output frame stride     {self.jump:>14d}",
            "",
            f"{'block':>5} {'params':>12} {'MFLOPS/s':>12} {'len factor':>10} {'RF':>6}",
        ]
        for b in self.per_block:
            lines.append(f"{b.block_id:>5d} {b.params:>12,d} {b.flops / 1e6:>12.3f} "
                         f"{b.output_length_factor:>10.4f} {b.receptive_field:>6d}")
        return "\n".join(lines)


# -- parameters --------------------------------------------------------------------

def block_params(spec: BlockSpec, d_in: int) -> int:
    out, k = spec.out_channels, spec.kernel_size
    total = 0
    d = d_in
    for _ in range(spec.num_layers):
        total += k * d + d            # depthwise + bias
        total += d * out + out        # pointwise + bias
        total += 2 * out              # BN gamma, beta
        d = out
    if spec.residual and spec.se:
        db = se_bottleneck(out)
        total += out * db + db + db * out + out
    if spec.residual:
        total += d_in * out + out + 2 * out
    return total


def decoder_params(cfg: DecoderConfig, enc_dim: int) -> int:
    V, E, H, J = cfg.vocab_size, cfg.embed_dim, cfg.hidden, cfg.joint_dim
    label_encoder = V * E + E + 4 * H * (E + H + 1)
    joint_net = enc_dim * J + H * J + J + J * V + V
    return label_encoder + joint_net


def encoder_params(config: EncoderConfig) -> int:
    return sum(block_params(s, d) for s, d in zip(config.blocks, config.block_inputs()))


# -- FLOPS -------------------------------------------------------------------------------

def pointwise_flops(d_in: int, d_out: int, length: float) -> float:
    return (2 * d_in * d_out + d_out) * length


def depthwise_flops(kernel: int, channels: int, length: float) -> float:
    return (2 * kernel + 1) * channels * length


def block_flops(spec: BlockSpec, d_in: int, in_length: float) -> float:
    out = spec.out_channels
    out_length = in_length / spec.stride
    total = 0.0
    d = d_in
    for j in range(spec.num_layers):
        length = out_length if j == spec.num_layers - 1 else in_length
        total += depthwise_flops(spec.kernel_size, d, length)
        total += pointwise_flops(d, out, length)
        total += (BN_OPS + ACT_OPS) * out * length
        d = out
    if spec.residual:
        if spec.se:
            db = se_bottleneck(out)
            # a global gate is computed once per utterance: a constant, left out of the rate
            gates = 0.0 if spec.se_window is None else out_length
            pooling = out * out_length + out * gates
            bottleneck = (pointwise_flops(out, db, 1) + ACT_OPS * db
                          + pointwise_flops(db, out, 1) + ACT_OPS * out) * gates
            total += pooling + bottleneck + out * out_length
        total += pointwise_flops(d_in, out, out_length) + BN_OPS * out * out_length
        total += (1 + ACT_OPS) * out * out_length
    return total


def count_flops(config: EncoderConfig, audio_seconds: float) -> float:
    """Encoder FLOPs to process ``audio_seconds`` of audio at a 10 ms frame rate."""
    if audio_seconds < 0:
        raise ValueError("audio_seconds must be non-negative")
    length = audio_seconds / FRAME_SHIFT
    total = 0.0
    for spec, d_in in zip(config.blocks, config.block_inputs()):
        total += block_flops(spec, d_in, length)
        length /= spec.stride
    return total


# -- receptive field -----------------------------------------------------------------

def layer_strides(spec: BlockSpec) -> list[int]:
    return [1] * (spec.num_layers - 1) + [spec.stride]


def receptive_field(config: EncoderConfig) -> tuple[int, int]:
    """``(rf, jump)``: input frames seen by one output frame, and the output frame stride."""
    rf, jump = 1, 1
    for spec in config.blocks:
        for stride in layer_strides(spec):
            rf += (spec.kernel_size - 1) * jump
            jump *= stride
    return rf, jump


# -- report ----------------------------------------------------------------------------------

def count_params(config: EncoderConfig, decoder_cfg: DecoderConfig | None = None,
                 audio_seconds: float = 1.0) -> CostReport:
    """Full cost report; ``decoder_cfg=None`` counts the encoder alone."""
    per_block = []
    rf, jump = 1, 1
    length = audio_seconds / FRAME_SHIFT
    factor = 1.0
    for i, (spec, d_in) in enumerate(zip(config.blocks, config.block_inputs())):
        flops = block_flops(spec, d_in, length)
        for stride in layer_strides(spec):
            rf += (spec.kernel_size - 1) * jump
            jump *= stride
        length /= spec.stride
        factor /= spec.stride
        per_block.append(BlockCost(i, block_params(spec, d_in), flops, factor, rf))
    enc = sum(b.params for b in per_block)
    dec = 0 if decoder_cfg is None else decoder_params(decoder_cfg, config.output_dim)
    flops_per_second = (sum(b.flops for b in per_block) / audio_seconds) if audio_seconds > 0 else 0.0
    return CostReport(
        total_params=enc + dec,
        encoder_params=enc,
        decoder_params=dec,
        flops_per_second_audio=flops_per_second,
        receptive_field=rf,
        jump=jump,
        per_block=per_block,
    )


cost_report = count_params
