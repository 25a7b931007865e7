"""Declarative layer descriptions shared by the network builder and the cost analyzer.

Nothing here touches tensors: a stage is a list of :class:`LayerSpec`
records carrying the sizes needed both to allocate parameters and to
count parameters and multiply-adds.
"""

import math
from dataclasses import dataclass

N_BINS = 161

@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | deconv | lstm | fc | activation | batchnorm | reshape | concat
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    c_in: int = 0
    c_out: int = 0
    f_in: int = 0
    f_out: int = 0
    units_in: int = 0
    units_out: int = 0
    sharing_group: str | None = None
    freq_pad: tuple = (0, 0)
    out_pad: int = 0
    activation: str | None = None

    def __post_init__(self):
        if min(self.stride) < 1:
            raise ValueError(f"{self.name}: strides must be >= 1")
        if self.kind in ("conv", "deconv") and self.stride[0] != 1:
            raise ValueError(f"{self.name}: time stride must be 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("kernel", "stride", "freq_pad"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# channel plan of one full-width stage
ENC_CHANNELS = (16, 16, 16, 32, 64)
DEC_CHANNELS = (32, 16, 16, 16)
KERNEL = (2, 3)
STRIDE = (1, 2)


def conv_out_width(f_in, k, s, pad=(0, 0)):
    return (f_in + pad[0] + pad[1] - k) // s + 1


def deconv_out_pad(f_in, f_out, k, s):
    return f_out - ((f_in - 1) * s + k)


def encoder_widths(f=N_BINS, n=5):
    widths = [f]
    for _ in range(n):
        widths.append(conv_out_width(widths[-1], KERNEL[1], STRIDE[1]))
    return widths


def scale_channels(c, width_scale):
    return max(1, math.ceil(c * width_scale - 1e-9))


def crnn_stage_specs(in_channels, enc, dec, target_kind="tms", n_bins=N_BINS):
    """One causal encoder / LSTM bottleneck / decoder stage.

    ``enc`` lists the five encoder output channels, ``dec`` the five
    decoder output channels (the last is 1). Decoder layer ``k`` consumes
    its predecessor concatenated with the mirrored encoder output. The
    LSTM width equals the flattened encoder output (channels x 4 bins).
    """
    widths = encoder_widths(n_bins)
    out_act = "sigmoid" if target_kind == "iam" else "softplus"
    specs = [LayerSpec("cascade", "concat", c_in=1, c_out=in_channels, f_in=n_bins, f_out=n_bins)]
    c_prev = in_channels
    for i in range(5):
        specs.append(LayerSpec(f"conv{i + 1}", "conv", KERNEL, STRIDE, c_prev, enc[i], widths[i], widths[i + 1]))
        specs.append(LayerSpec(f"bn{i + 1}", "batchnorm", c_in=enc[i], c_out=enc[i], f_in=widths[i + 1], f_out=widths[i + 1]))
        specs.append(LayerSpec(f"elu{i + 1}", "activation", activation="elu"))
        c_prev = enc[i]
    bottleneck = enc[4] * widths[5]
    specs.append(LayerSpec("reshape_in", "reshape", c_in=enc[4], f_in=widths[5], units_out=bottleneck))
    for j in (1, 2):
        specs.append(LayerSpec(f"lstm{j}", "lstm", units_in=bottleneck, units_out=bottleneck, sharing_group=f"lstm{j}"))
    specs.append(LayerSpec("reshape_out", "reshape", units_in=bottleneck, c_out=enc[4], f_out=widths[5]))
    h = enc[4]
    for k in range(5):
        skip_c = enc[4 - k]
        f_in, f_out = widths[5 - k], widths[4 - k]
        specs.append(LayerSpec(f"skip{k + 1}", "concat", c_in=h, c_out=h + skip_c, f_in=f_in, f_out=f_in))
        specs.append(LayerSpec(f"deconv{k + 1}", "deconv", KERNEL, STRIDE, h + skip_c, dec[k], f_in, f_out,
                               out_pad=deconv_out_pad(f_in, f_out, KERNEL[1], STRIDE[1])))
        if k < 4:
            specs.append(LayerSpec(f"dbn{k + 1}", "batchnorm", c_in=dec[k], c_out=dec[k], f_in=f_out, f_out=f_out))
            specs.append(LayerSpec(f"delu{k + 1}", "activation", activation="elu"))
        h = dec[k]
    specs.append(LayerSpec("output", "activation", activation=out_act))
    return specs


def stage_layer_specs(q, width_scale=1.0, target_kind="tms"):
    """Layer specs for stage ``q`` (1-based) of the progressive network."""
    enc = [scale_channels(c, width_scale) for c in ENC_CHANNELS]
    dec = [scale_channels(c, width_scale) for c in DEC_CHANNELS] + [1]
    return crnn_stage_specs(q, enc, dec, target_kind)


def plcrnn_layer_specs(q_stages, width_scale=1.0, target_kind="tms"):
    return [stage_layer_specs(q, width_scale, target_kind) for q in range(1, q_stages + 1)]
