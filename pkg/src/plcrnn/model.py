"""Declarative layer specs and the progressive causal CRNN built from them.

Every stage is a causal convolutional encoder (five strided convolutions),
a two-layer LSTM bottleneck whose parameters are shared by all stages, and
a mirrored transposed-convolution decoder with skip connections. Stage
``q`` sees the noisy magnitude concatenated on the channel axis with the
magnitude estimates of stages ``1..q-1``.
"""

import io
import json
import math
import struct
from dataclasses import asdict

import numpy as np

from . import tensor as T
from .dsp import N_BINS, istft_ola, stft
from .layers import LayerSpec, plcrnn_layer_specs
from .seeding import stream
from .targets import StagePlan
from .tensor import BatchNormState, Tensor, no_grad


class CheckpointError(ValueError):
    pass


class StructuralMismatchError(CheckpointError):
    pass


class ModelGraph:
    """Stages of layer specs plus a parameter store keyed by layer or sharing group."""

    def __init__(self, plan, width_scale, stages, dtype):
        self.plan = plan
        self.width_scale = float(width_scale)
        self.stages = stages
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.bn = {}
        self._by_name = [{s.name: s for s in stage} for stage in stages]

    @property
    def q(self):
        return self.plan.q

    @property
    def target_kind(self):
        return self.plan.target_kind

    def layer_key(self, q, spec):
        return spec.sharing_group or f"s{q}.{spec.name}"

    def spec(self, q, name):
        return self._by_name[q - 1][name]

    def layer_params(self, q, name):
        spec = self.spec(q, name)
        return self.params[self.layer_key(q, spec)]

    def named_parameters(self):
        for key, group in self.params.items():
            for pname, t in group.items():
                yield f"{key}.{pname}", t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def state_arrays(self):
        """All persistent arrays: parameters and batch-norm running statistics."""
        out = {name: t.data for name, t in self.named_parameters()}
        for key, st in self.bn.items():
            out[f"{key}.running_mean"] = st.mean
            out[f"{key}.running_var"] = st.var
        return out

    def calibrate(self, noisy_mag, frame_mask=None):
        """Run one train-mode pass without gradients to fill batch-norm statistics."""
        with no_grad():
            forward(self, noisy_mag, mode="train", frame_mask=frame_mask)
        return self


def _glorot(rng, shape, fan_in, fan_out, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


def _init_layer(spec, rng, dtype):
    kt, kf = spec.kernel
    if spec.kind == "conv":
        w = _glorot(rng, (spec.c_out, spec.c_in, kt, kf), spec.c_in * kt * kf, spec.c_out * kt * kf, dtype)
        return {"weight": w, "bias": np.zeros(spec.c_out, dtype)}
    if spec.kind == "deconv":
        w = _glorot(rng, (spec.c_in, spec.c_out, kt, kf), spec.c_in * kt * kf, spec.c_out * kt * kf, dtype)
        return {"weight": w, "bias": np.zeros(spec.c_out, dtype)}
    if spec.kind == "fc":
        w = _glorot(rng, (spec.units_in, spec.units_out), spec.units_in, spec.units_out, dtype)
        return {"weight": w, "bias": np.zeros(spec.units_out, dtype)}
    if spec.kind == "lstm":
        d, h = spec.units_in, spec.units_out
        lim = 1.0 / math.sqrt(h)
        bias = np.zeros(4 * h, dtype)
        bias[h:2 * h] = 1.0
        return {"w_ih": rng.uniform(-lim, lim, (d, 4 * h)).astype(dtype),
                "w_hh": rng.uniform(-lim, lim, (h, 4 * h)).astype(dtype),
                "bias": bias}
    if spec.kind == "batchnorm":
        return {"gamma": np.ones(spec.c_out, dtype), "beta": np.zeros(spec.c_out, dtype)}
    return None


def build_plcrnn(plan, width_scale=1.0, seed=0, dtype=None):
    if plan.q < 2:
        raise ValueError("the progressive network needs Q >= 2")
    dtype = np.dtype(dtype or T.get_default_dtype())
    stages = plcrnn_layer_specs(plan.q, width_scale, plan.target_kind)
    graph = ModelGraph(plan, width_scale, stages, dtype)
    rng = stream("init", seed)
    for q, stage in enumerate(stages, start=1):
        for spec in stage:
            key = graph.layer_key(q, spec)
            if key in graph.params:
                continue
            arrays = _init_layer(spec, rng, dtype)
            if arrays is None:
                continue
            graph.params[key] = {n: Tensor(a, requires_grad=True, name=f"{key}.{n}") for n, a in arrays.items()}
            if spec.kind == "batchnorm":
                graph.bn[key] = BatchNormState(spec.c_out)
    return graph


def count_params(graph):
    seen = set()
    total = 0
    for t in graph.parameters():
        if id(t) not in seen:
            seen.add(id(t))
            total += t.size
    return total


def _as_input(graph, noisy_mag):
    if isinstance(noisy_mag, Tensor):
        x = noisy_mag
    else:
        x = Tensor(np.asarray(noisy_mag, dtype=graph.dtype))
    if x.ndim not in (2, 3) or x.shape[-1] != N_BINS:
        raise T.DimensionError(f"expected T x {N_BINS} or B x T x {N_BINS} magnitudes, got {x.shape}")
    return x


def _run_stage(graph, q, x_in, training, frame_mask):
    p = lambda name: graph.layer_params(q, name)
    spec = lambda name: graph.spec(q, name)
    h = x_in
    skips = []
    for i in range(1, 6):
        s = spec(f"conv{i}")
        w = p(f"conv{i}")
        h = T.conv2d_causal(h, w["weight"], w["bias"], s.stride, s.freq_pad)
        key = graph.layer_key(q, spec(f"bn{i}"))
        bn = graph.params[key]
        h = T.batch_norm(h, bn["gamma"], bn["beta"], graph.bn[key], training, frame_mask)
        h = T.elu(h)
        skips.append(h)
    B, C, Tn, F = h.shape
    h = T.reshape(T.transpose(h, (0, 2, 1, 3)), (B, Tn, C * F))
    for j in (1, 2):
        w = p(f"lstm{j}")
        h = T.lstm(h, w["w_ih"], w["w_hh"], w["bias"])
    h = T.transpose(T.reshape(h, (B, Tn, C, F)), (0, 2, 1, 3))
    for k in range(1, 6):
        h = T.concat([h, skips[5 - k]], axis=1)
        s = spec(f"deconv{k}")
        w = p(f"deconv{k}")
        h = T.deconv2d_causal(h, w["weight"], w["bias"], s.stride, s.out_pad, out_width=s.f_out)
        if k < 5:
            key = graph.layer_key(q, spec(f"dbn{k}"))
            bn = graph.params[key]
            h = T.batch_norm(h, bn["gamma"], bn["beta"], graph.bn[key], training, frame_mask)
            h = T.elu(h)
    h = T.activation(h, spec("output").activation)
    return T.reshape(h, (B, Tn, h.shape[-1]))


def forward(graph, noisy_mag, mode="train", frame_mask=None):
    """Return the ``Q`` stage outputs (masks for IAM, magnitudes for TMS).

    ``noisy_mag`` is ``T x 161`` or ``B x T x 161``; outputs match its rank.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _as_input(graph, noisy_mag)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
        if frame_mask is not None:
            frame_mask = np.asarray(frame_mask).reshape(1, -1)
    B, Tn, F = x.shape
    x4 = T.reshape(x, (B, 1, Tn, F))
    cascade = [x4]
    outputs = []
    for q in range(1, graph.q + 1):
        x_in = T.concat(cascade, axis=1) if len(cascade) > 1 else cascade[0]
        out = _run_stage(graph, q, x_in, mode == "train", frame_mask)
        outputs.append(T.reshape(out, (Tn, F)) if squeeze else out)
        est = out * x if graph.target_kind == "iam" else out
        cascade.append(T.reshape(est, (B, 1, Tn, F)))
    return outputs


def stage_magnitudes(graph, noisy_mag, outputs):
    """Convert stage outputs to magnitude estimates (masks times ``|X|`` for IAM)."""
    xm = np.asarray(noisy_mag, dtype=np.float64)
    mags = []
    for o in outputs:
        o = np.asarray(o.data if isinstance(o, Tensor) else o, dtype=np.float64)
        mags.append(o * xm if graph.target_kind == "iam" else o)
    return mags


def enhance_stages(graph, noisy):
    """Enhance with every stage; returns ``(signals, magnitudes)`` per stage."""
    spec = stft(noisy)
    xm = spec.magnitude
    with no_grad():
        outs = forward(graph, xm, mode="eval")
    mags = stage_magnitudes(graph, xm, outs)
    signals = [istft_ola(m, spec.phase, length=spec.length) for m in mags]
    return signals, mags


def enhance_utterance(graph, noisy, mask_override=None):
    """STFT, network, final-stage magnitude, noisy-phase OLA, trim to input length.

    ``mask_override`` (``T x 161``) replaces the network with a fixed mask
    applied to the noisy magnitude; ``graph`` may then be ``None``.
    """
    spec = stft(noisy)
    xm = spec.magnitude
    if mask_override is not None:
        mask = np.asarray(mask_override, dtype=np.float64)
        if mask.shape != xm.shape:
            raise T.DimensionError(f"mask {mask.shape} does not match spectrogram {xm.shape}")
        mag = mask * xm
    else:
        with no_grad():
            outs = forward(graph, xm, mode="eval")
        mag = stage_magnitudes(graph, xm, outs[-1:])[0]
    return istft_ola(mag, spec.phase, length=spec.length)


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"PLCR"
CKPT_VERSION = 1
_KIND_CODES = {"tms": 0, "iam": 1}


def save_checkpoint(graph, path):
    """Header (magic, version, Q, target kind, width scale), JSON layer table, tensor blocks."""
    arrays = graph.state_arrays()
    meta = {
        "deltas_db": list(graph.plan.deltas_db),
        "alphas": list(graph.plan.alphas),
        "dtype": graph.dtype.name,
        "stages": [[asdict(s) for s in stage] for stage in graph.stages],
        "bn_initialized": {k: st.initialized for k, st in graph.bn.items()},
        "blocks": list(arrays),
    }
    blob = json.dumps(meta).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<III", CKPT_VERSION, graph.q, _KIND_CODES[graph.target_kind]))
    buf.write(struct.pack("<d", graph.width_scale))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name, arr in arrays.items():
        enc = name.encode("utf-8")
        buf.write(struct.pack("<I", len(enc)))
        buf.write(enc)
        T.write_tensor(buf, arr)
    with open(path, "wb") as fp:
        fp.write(buf.getvalue())


def _read(fp, n, what):
    b = fp.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return b


def load_checkpoint(path, expect_q=None, expect_target=None):
    """Rebuild a graph from ``path``; raises before returning a partial graph."""
    with open(path, "rb") as f:
        fp = io.BytesIO(f.read())
    if _read(fp, 4, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a PLCR checkpoint")
    version, q, kind_code = struct.unpack("<III", _read(fp, 12, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (width_scale,) = struct.unpack("<d", _read(fp, 8, "header"))
    (n,) = struct.unpack("<I", _read(fp, 4, "header"))
    try:
        meta = json.loads(_read(fp, n, "layer table").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt layer table ({exc})") from exc
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind_code not in kinds:
        raise CheckpointError(f"{path}: unknown target kind code {kind_code}")
    kind = kinds[kind_code]
    if expect_q is not None and expect_q != q:
        raise StructuralMismatchError(f"checkpoint has Q={q} stages but the run expects Q={expect_q}")
    if expect_target is not None and expect_target != kind:
        raise StructuralMismatchError(f"checkpoint target is {kind!r} but the run expects {expect_target!r}")
    blocks = {}
    for name in meta["blocks"]:
        (ln,) = struct.unpack("<I", _read(fp, 4, f"block {name}"))
        got = _read(fp, ln, f"block {name}").decode("utf-8")
        if got != name:
            raise CheckpointError(f"{path}: expected block {name}, found {got}")
        try:
            blocks[name] = T.read_tensor(fp)
        except T.SerializationError as exc:
            raise CheckpointError(f"{path}: block {name}: {exc}") from exc

    plan = StagePlan(q, tuple(meta["deltas_db"]), tuple(meta["alphas"]), kind)
    graph = build_plcrnn(plan, width_scale, dtype=meta["dtype"])
    stored = [[LayerSpec.from_dict(d) for d in stage] for stage in meta["stages"]]
    for qi, (mine, theirs) in enumerate(zip(graph.stages, stored), start=1):
        for a, b in zip(mine, theirs):
            if a != b:
                raise StructuralMismatchError(f"stage {qi} layer {a.name}: checkpoint spec {b} != {a}")
        if len(mine) != len(theirs):
            raise StructuralMismatchError(f"stage {qi}: layer count differs")
    expected = graph.state_arrays()
    if set(expected) != set(blocks):
        missing = sorted(set(expected) ^ set(blocks))
        raise StructuralMismatchError(f"checkpoint blocks differ from model: {missing[:5]}")
    for name, arr in blocks.items():
        if arr.shape != expected[name].shape:
            raise StructuralMismatchError(f"layer {name}: checkpoint shape {arr.shape}, model {expected[name].shape}")
    for name, t in graph.named_parameters():
        t.data = blocks[name].astype(graph.dtype)
    for key, st in graph.bn.items():
        st.mean = blocks[f"{key}.running_mean"].astype(np.float64)
        st.var = blocks[f"{key}.running_var"].astype(np.float64)
        st.initialized = bool(meta["bn_initialized"][key])
    return graph
