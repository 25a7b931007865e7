"""Parameter and multiply-add accounting from declarative layer specs.

Counts are derived from :class:`~plcrnn.layers.LayerSpec` sizes alone,
without instantiating any tensors, so they serve as an independent check
on the parameter store of a built network.

Conventions:

* convolution (and transposed convolution): ``T * F * (C_in*K_T*K_F + 1) * C_out``
  with ``F`` the *output* width and the ``+1`` the bias;
* fully connected: ``F_i * F_o`` (bias not counted as a multiply-add);
* LSTM: treated as fully connected with a recurrent input,
  ``4 * (D*H + H*H)`` per frame; parameters ``4 * (D*H + H*H + H)``;
* batch norm and activations cost nothing; batch norm has ``2C`` parameters;
* parameters of a sharing group count once, multiply-adds count per use.
"""

from dataclasses import dataclass, field

from .layers import LayerSpec, conv_out_width, crnn_stage_specs, plcrnn_layer_specs


class SpecError(ValueError):
    pass


def fma_conv(T, F, c_in, c_out, k_t, k_f):
    for name, v in (("T", T), ("F", F), ("C_in", c_in), ("C_out", c_out), ("K_T", k_t), ("K_F", k_f)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    return T * F * (c_in * k_t * k_f + 1) * c_out


def fma_fc(f_i, f_o):
    if f_i < 1 or f_o < 1:
        raise ValueError(f"fully connected sizes must be >= 1, got {f_i}x{f_o}")
    return f_i * f_o


def lstm_cost(d_in, h):
    """Return ``(params, fmas_per_frame)`` of one LSTM layer."""
    if d_in < 1 or h < 1:
        raise ValueError(f"LSTM sizes must be >= 1, got D={d_in}, H={h}")
    return 4 * (d_in * h + h * h + h), 4 * (d_in * h + h * h)


def check_layer(spec):
    k_t, k_f = spec.kernel
    if spec.kind == "conv":
        if spec.c_in < 1 or spec.c_out < 1:
            raise SpecError(f"layer {spec.name}: channels must be >= 1")
        want = conv_out_width(spec.f_in, k_f, spec.stride[1], spec.freq_pad)
        if want != spec.f_out:
            raise SpecError(f"layer {spec.name}: conv maps width {spec.f_in} to {want}, spec says {spec.f_out}")
    elif spec.kind == "deconv":
        if spec.c_in < 1 or spec.c_out < 1:
            raise SpecError(f"layer {spec.name}: channels must be >= 1")
        want = (spec.f_in - 1) * spec.stride[1] + k_f + spec.out_pad
        if want != spec.f_out:
            raise SpecError(f"layer {spec.name}: deconv maps width {spec.f_in} to {want}, spec says {spec.f_out}")
    elif spec.kind in ("fc", "lstm"):
        if spec.units_in < 1 or spec.units_out < 1:
            raise SpecError(f"layer {spec.name}: units must be >= 1")
    elif spec.kind == "batchnorm":
        if spec.c_out < 1:
            raise SpecError(f"layer {spec.name}: channels must be >= 1")
    elif spec.kind not in ("activation", "reshape", "concat"):
        raise SpecError(f"layer {spec.name}: unknown kind {spec.kind!r}")


def layer_cost(spec):
    """``(params, fmas)`` for one use of ``spec`` at one output frame."""
    k_t, k_f = spec.kernel
    if spec.kind in ("conv", "deconv"):
        params = spec.c_in * k_t * k_f * spec.c_out + spec.c_out
        return params, fma_conv(1, spec.f_out, spec.c_in, spec.c_out, k_t, k_f)
    if spec.kind == "fc":
        return spec.units_in * spec.units_out + spec.units_out, fma_fc(spec.units_in, spec.units_out)
    if spec.kind == "lstm":
        return lstm_cost(spec.units_in, spec.units_out)
    if spec.kind == "batchnorm":
        return 2 * spec.c_out, 0
    return 0, 0


def _shape_signature(spec):
    return (spec.kind, spec.kernel, spec.c_in, spec.c_out, spec.units_in, spec.units_out)


@dataclass
class BaselineSpec:
    name: str
    stages: list


@dataclass
class CostRow:
    stage: int
    name: str
    kind: str
    params: int
    fmas: int
    share: str = ""


@dataclass
class CostReport:
    name: str
    rows: list = field(default_factory=list)

    @property
    def params(self):
        return sum(r.params for r in self.rows)

    @property
    def fmas(self):
        return sum(r.fmas for r in self.rows)

    @property
    def params_m(self):
        return self.params / 1e6

    @property
    def fmas_m(self):
        return self.fmas / 1e6


def analyze(spec, frames=1):
    """Per-layer and total parameters and multiply-adds over ``frames`` frames."""
    rows = []
    groups = {}
    for q, stage in enumerate(spec.stages, start=1):
        for layer in stage:
            check_layer(layer)
            params, fmas = layer_cost(layer)
            g = layer.sharing_group
            if g:
                sig = _shape_signature(layer)
                if g in groups:
                    if groups[g] != sig:
                        raise SpecError(f"layer {layer.name}: shape differs from earlier members of group {g!r}")
                    params = 0
                else:
                    groups[g] = sig
            if layer.kind in ("activation", "reshape", "concat"):
                continue
            rows.append(CostRow(q, layer.name, layer.kind, params, fmas * frames, g or ""))
    return CostReport(spec.name, rows)


# -- built-in architectures ------------------------------------------------------

def pl_dnn_spec(q_stages=3, context=11, hidden=2048, n_bins=161):
    """Feed-forward progressive baseline; stage 1 sees ``context`` stacked frames."""
    stages = []
    f_in = n_bins * context
    for q in range(1, q_stages + 1):
        stages.append([
            LayerSpec("fc1", "fc", units_in=f_in, units_out=hidden),
            LayerSpec("fc2", "fc", units_in=hidden, units_out=hidden),
            LayerSpec("fc3", "fc", units_in=hidden, units_out=n_bins),
        ])
        f_in = n_bins
    return BaselineSpec("pl-dnn", stages)


def pl_lstm_spec(q_stages=3, hidden=1024, n_bins=161):
    """LSTM progressive baseline with dense input connections across stages."""
    stages = []
    for q in range(1, q_stages + 1):
        stages.append([
            LayerSpec("lstm1", "lstm", units_in=n_bins * q, units_out=hidden),
            LayerSpec("lstm2", "lstm", units_in=hidden, units_out=hidden),
            LayerSpec("fc", "fc", units_in=hidden, units_out=n_bins),
        ])
    return BaselineSpec("pl-lstm", stages)


def crnn_spec():
    return BaselineSpec("crnn", [crnn_stage_specs(1, (16, 32, 64, 128, 256), (128, 64, 32, 16, 1))])


def scrnn_spec():
    return BaselineSpec("scrnn", [crnn_stage_specs(1, (8, 16, 32, 64, 128), (64, 32, 16, 8, 1))])


def plcrnn_spec(q_stages, width_scale=1.0):
    suffix = "" if width_scale == 1.0 else f"-x{width_scale:g}"
    return BaselineSpec(f"pl-crnn-q{q_stages}{suffix}", plcrnn_layer_specs(q_stages, width_scale))


BUILTINS = {
    "pl-dnn": pl_dnn_spec,
    "pl-lstm": pl_lstm_spec,
    "crnn": crnn_spec,
    "scrnn": scrnn_spec,
    "pl-crnn-q3": lambda: plcrnn_spec(3),
    "pl-crnn-q5": lambda: plcrnn_spec(5),
}

# (params, fmas) in millions as published for each builtin
PUBLISHED = {
    "pl-dnn": (17.87, 17.87),
    "pl-lstm": (42.25, 42.25),
    "crnn": (17.59, 25.28),
    "scrnn": (4.40, 6.34),
    "pl-crnn-q3": (1.22, 5.94),
    "pl-crnn-q5": (1.33, 9.94),
}


def builtin(name):
    try:
        return BUILTINS[name]()
    except KeyError:
        raise SpecError(f"unknown builtin {name!r}; valid names: {', '.join(BUILTINS)}") from None


# -- spec files --------------------------------------------------------------------
#
# One layer per line: ``<kind> <name> key=value ...``; ``stage`` starts a new
# stage, ``name <text>`` names the spec, ``#`` starts a comment. Keys:
# c_in c_out f_in f_out d_in units kernel=KTxKF stride=STxSF freq_pad=LOxHI
# out_pad share fn. ``channels`` sets c_in and c_out (batchnorm).

_INT_KEYS = {"c_in": "c_in", "c_out": "c_out", "f_in": "f_in", "f_out": "f_out",
             "d_in": "units_in", "units": "units_out", "out_pad": "out_pad"}
_PAIR_KEYS = {"kernel", "stride", "freq_pad"}


def _parse_pair(text, key, lineno):
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise SpecError(f"line {lineno}: {key} must look like AxB, got {text!r}") from None


def parse_spec(text, name="custom"):
    stages = [[]]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        head = parts[0].lower()
        if head == "name":
            name = " ".join(parts[1:])
            continue
        if head == "stage":
            if stages[-1]:
                stages.append([])
            continue
        if len(parts) < 2:
            raise SpecError(f"line {lineno}: expected '<kind> <name> key=value ...'")
        kind, lname = head, parts[1]
        kwargs = {}
        for tok in parts[2:]:
            if "=" not in tok:
                raise SpecError(f"layer {lname}: malformed field {tok!r}")
            k, v = tok.split("=", 1)
            if k in _INT_KEYS:
                try:
                    kwargs[_INT_KEYS[k]] = int(v)
                except ValueError:
                    raise SpecError(f"layer {lname}: {k} must be an integer, got {v!r}") from None
            elif k in _PAIR_KEYS:
                kwargs[k] = _parse_pair(v, k, lineno)
            elif k == "channels":
                kwargs["c_in"] = kwargs["c_out"] = int(v)
            elif k == "share":
                kwargs["sharing_group"] = v
            elif k == "fn":
                kwargs["activation"] = v
            else:
                raise SpecError(f"layer {lname}: unknown field {k!r}")
        try:
            stages[-1].append(LayerSpec(lname, kind, **kwargs))
        except (TypeError, ValueError) as exc:
            raise SpecError(f"layer {lname}: {exc}") from exc
    return BaselineSpec(name, [s for s in stages if s])


def format_spec(spec):
    """Inverse of :func:`parse_spec` for the fields the analyzer uses."""
    lines = [f"name {spec.name}"]
    inv = {v: k for k, v in _INT_KEYS.items()}
    defaults = LayerSpec("_", "_")
    for stage in spec.stages:
        lines.append("stage")
        for layer in stage:
            toks = [layer.kind, layer.name]
            for attr in ("c_in", "c_out", "f_in", "f_out", "units_in", "units_out", "out_pad"):
                v = getattr(layer, attr)
                if v != getattr(defaults, attr):
                    toks.append(f"{inv[attr]}={v}")
            for attr in ("kernel", "stride", "freq_pad"):
                v = getattr(layer, attr)
                if v != getattr(defaults, attr):
                    toks.append(f"{attr}={v[0]}x{v[1]}")
            if layer.sharing_group:
                toks.append(f"share={layer.sharing_group}")
            if layer.activation:
                toks.append(f"fn={layer.activation}")
            lines.append(" ".join(toks))
    return "\n".join(lines) + "\n"


# -- rendering -----------------------------------------------------------------------

MACHINE_HEADER = ("stage", "layer", "kind", "share", "params", "fmas")


def render_report(report, fmt="text"):
    if fmt == "machine":
        lines = ["\t".join(MACHINE_HEADER)]
        for r in report.rows:
            lines.append(f"{r.stage}\t{r.name}\t{r.kind}\t{r.share}\t{r.params}\t{r.fmas}")
        lines.append(f"total\t{report.name}\t\t\t{report.params}\t{report.fmas}")
        return "\n".join(lines) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    head = f"{'stage':>5}  {'layer':<12} {'kind':<10} {'share':<8} {'params':>12} {'fmas':>14}"
    lines = [head, "-" * len(head)]
    for r in report.rows:
        lines.append(f"{r.stage:>5}  {r.name:<12} {r.kind:<10} {r.share:<8} {r.params:>12,} {r.fmas:>14,}")
    lines.append("-" * len(head))
    lines.append(f"{'total':>5}  {'':<12} {'':<10} {'':<8} {report.params:>12,} {report.fmas:>14,}")
    lines.append("")
    lines.append("model | NumOfParas (M) | FMAs (M)")
    lines.append(f"{report.name} | {report.params_m:.2f} | {report.fmas_m:.2f}")
    return "\n".join(lines) + "\n"


def parse_machine(text):
    lines = [l for l in text.splitlines() if l]
    if not lines or tuple(lines[0].split("\t")) != MACHINE_HEADER:
        raise ValueError("not a machine-format cost report")
    rows, name, totals = [], "", None
    for line in lines[1:]:
        f = line.split("\t")
        if f[0] == "total":
            name, totals = f[1], (int(f[4]), int(f[5]))
            continue
        rows.append(CostRow(int(f[0]), f[1], f[2], int(f[4]), int(f[5]), f[3]))
    report = CostReport(name, rows)
    if totals is not None and totals != (report.params, report.fmas):
        raise ValueError(f"report totals {totals} disagree with rows {(report.params, report.fmas)}")
    return report
