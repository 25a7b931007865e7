import numpy as np
import pytest

from plcrnn import complexity
from plcrnn.dsp import stft
from plcrnn.layers import encoder_widths, plcrnn_layer_specs
from plcrnn.mixer import sdr, synth_corpus
from plcrnn.model import (CheckpointError, StructuralMismatchError, build_plcrnn, count_params, enhance_stages,
                          enhance_utterance, forward, load_checkpoint, save_checkpoint)
from plcrnn.targets import StagePlan, iam
from plcrnn.tensor import BatchNormStateError, DimensionError, default_dtype, gradient_check, Tensor


def small_graph(q=3, kind="tms", scale=0.0625, seed=0):
    g = build_plcrnn(StagePlan.standard(q, kind), scale, seed=seed)
    g.calibrate(np.random.default_rng(seed).random((2, 12, 161)))
    return g


def test_encoder_widths():
    assert encoder_widths() == [161, 80, 39, 19, 9, 4]


@pytest.mark.parametrize("q,expect", [(3, 1_219_683), (5, 1_332_869)])
def test_full_width_parameter_counts(q, expect):
    g = build_plcrnn(StagePlan.standard(q), 1.0)
    assert count_params(g) == expect
    assert count_params(g) == complexity.analyze(complexity.plcrnn_spec(q)).params


def test_q2_and_q3_differ_only_in_cascade_widths():
    a, b = plcrnn_layer_specs(2), plcrnn_layer_specs(3)
    for sa, sb in zip(a[1], b[1]):
        if sa.name in ("cascade", "conv1"):
            continue
        assert sa == sb
    assert b[2][1].c_in == 3 and a[1][1].c_in == 2


def test_lstm_layers_shared_across_stages():
    g = build_plcrnn(StagePlan.standard(3), 0.25)
    assert g.layer_params(1, "lstm1") is g.layer_params(3, "lstm1")
    assert g.layer_params(1, "conv1") is not g.layer_params(2, "conv1")


@pytest.mark.parametrize("kind", ["tms", "iam"])
def test_forward_shapes_and_ranges(kind):
    g = small_graph(kind=kind)
    x = np.random.default_rng(1).random((9, 161))
    outs = forward(g, x, mode="eval")
    assert len(outs) == 3 and all(o.shape == (9, 161) for o in outs)
    vals = np.concatenate([o.data.ravel() for o in outs])
    if kind == "iam":
        assert vals.min() > 0 and vals.max() < 1
    else:
        assert vals.min() >= 0
    # far outside the calibration range float32 sigmoid may round to exactly 0 or 1
    loud = np.concatenate([o.data.ravel() for o in forward(g, x * 50, mode="eval")])
    assert np.all(np.isfinite(loud)) and loud.min() >= 0
    if kind == "iam":
        assert loud.max() <= 1
    assert forward(g, np.stack([x, x]), mode="eval")[0].shape == (2, 9, 161)


def test_forward_rejects_wrong_bins():
    with pytest.raises(DimensionError):
        forward(small_graph(), np.ones((4, 160)), mode="eval")


def test_eval_before_calibration_raises():
    g = build_plcrnn(StagePlan.standard(2), 0.0625)
    with pytest.raises(BatchNormStateError):
        forward(g, np.ones((3, 161)), mode="eval")


def test_causality_spot_check():
    g = small_graph()
    rng = np.random.default_rng(2)
    x = rng.random((20, 161))
    base = [o.data for o in forward(g, x, mode="eval")]
    for t in (0, 7, 18):
        y = x.copy()
        y[t + 1:] = rng.random((19 - t, 161)) * 10
        for a, b in zip(base, forward(g, y, mode="eval")):
            assert np.array_equal(a[:t + 1], b.data[:t + 1])


def test_batched_eval_matches_single():
    g = small_graph()
    rng = np.random.default_rng(3)
    x = rng.random((2, 6, 161))
    ob = forward(g, x, mode="eval")[-1].data
    np.testing.assert_allclose(ob[1], forward(g, x[1], mode="eval")[-1].data, rtol=1e-5, atol=1e-6)


def test_one_stage_gradients_match_finite_differences():
    with default_dtype(np.float64):
        g = build_plcrnn(StagePlan.standard(2, "iam"), 0.0625, seed=4)
    x = Tensor(np.random.default_rng(4).random((1, 8, 161)), dtype=np.float64)
    named = list(g.named_parameters())
    params = [t for n, t in named if n.startswith("s1.") or n.startswith("lstm")]

    def loss(*_):
        return forward(g, x, mode="train")[0].square().mean()

    assert gradient_check(loss, params, eps=1e-5, max_entries=6, rng=np.random.default_rng(0)) < 1e-3


def test_enhance_keeps_length_and_is_finite():
    pair = synth_corpus(1, seed=5, max_dur=0.6)[0]
    g = small_graph(kind="iam")
    y = enhance_utterance(g, pair.noisy)
    assert len(y) == len(pair.noisy)
    assert np.all(np.isfinite(y.samples)) and np.max(np.abs(y.samples)) < 10 * np.max(np.abs(pair.noisy.samples))
    signals, mags = enhance_stages(g, pair.noisy)
    assert len(signals) == 3 and mags[0].shape == stft(pair.noisy).magnitude.shape


def test_oracle_mask_beats_noisy_and_zero_mask_is_silent():
    pair = synth_corpus(1, seed=6, snr_grid=[0])[0]
    mask = iam(stft(pair.clean), stft(pair.noisy))
    y = enhance_utterance(None, pair.noisy, mask_override=mask)
    assert sdr(pair.clean, y) > sdr(pair.clean, pair.noisy) + 5
    z = enhance_utterance(None, pair.noisy, mask_override=np.zeros_like(mask))
    assert np.sum(z.samples ** 2) < 1e-6 * np.sum(pair.noisy.samples ** 2)


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    g = small_graph(kind="iam")
    path = tmp_path / "m.ckpt"
    save_checkpoint(g, path)
    h = load_checkpoint(path)
    x = np.random.default_rng(7).random((6, 161))
    for a, b in zip(forward(g, x, mode="eval"), forward(h, x, mode="eval")):
        assert np.array_equal(a.data, b.data)
    assert h.plan == g.plan and h.width_scale == g.width_scale


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_graph(), path)
    raw = path.read_bytes()
    for cut in (3, 30, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_checkpoint_stage_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_graph(q=3), path)
    with pytest.raises(StructuralMismatchError, match="Q=3"):
        load_checkpoint(path, expect_q=5)
    with pytest.raises(StructuralMismatchError):
        load_checkpoint(path, expect_target="iam")


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_build_is_seeded():
    a = build_plcrnn(StagePlan.standard(2), 0.125, seed=3)
    b = build_plcrnn(StagePlan.standard(2), 0.125, seed=3)
    c = build_plcrnn(StagePlan.standard(2), 0.125, seed=4)
    pa, pb, pc = (dict(g.named_parameters()) for g in (a, b, c))
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)
    assert not np.array_equal(pa["s1.conv1.weight"].data, pc["s1.conv1.weight"].data)
