"""Stage plans, per-stage training targets (TMS / IAM) and the weighted loss."""

from dataclasses import dataclass

import numpy as np

from .dsp import stft
from .mixer import make_improved_mixture
from .tensor import Tensor, mse_loss

# intermediate SNR improvements (dB) for stages 1..Q-1; stage Q is clean
TABLE2 = {
    2: (20.0,),
    3: (10.0, 20.0),
    4: (5.0, 10.0, 20.0),
    5: (5.0, 10.0, 15.0, 20.0),
}
TARGET_KINDS = ("tms", "iam")
INTERMEDIATE_ALPHA = 0.1
FINAL_ALPHA = 1.0


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class StagePlan:
    q: int
    deltas_db: tuple
    alphas: tuple
    target_kind: str = "tms"

    def __post_init__(self):
        if self.q < 2:
            raise PlanError(f"need at least 2 stages, got {self.q}")
        if self.target_kind not in TARGET_KINDS:
            raise PlanError(f"target kind must be one of {TARGET_KINDS}, got {self.target_kind!r}")
        if len(self.deltas_db) != self.q - 1:
            raise PlanError(f"{self.q} stages need {self.q - 1} SNR improvements, got {len(self.deltas_db)}")
        if len(self.alphas) != self.q:
            raise PlanError(f"{self.q} stages need {self.q} loss weights, got {len(self.alphas)}")
        if any(d < 0 for d in self.deltas_db):
            raise PlanError("SNR improvements must be non-negative")
        if any(b <= a for a, b in zip(self.deltas_db, self.deltas_db[1:])):
            raise PlanError(f"SNR improvements must be strictly increasing, got {self.deltas_db}")

    @classmethod
    def standard(cls, q, target_kind="tms"):
        if q not in TABLE2:
            raise PlanError(f"no standard plan for Q={q}; standard plans exist for Q in {sorted(TABLE2)}")
        return cls.custom(TABLE2[q], target_kind)

    @classmethod
    def custom(cls, deltas_db, target_kind="tms"):
        deltas = tuple(float(d) for d in deltas_db)
        q = len(deltas) + 1
        alphas = (INTERMEDIATE_ALPHA,) * (q - 1) + (FINAL_ALPHA,)
        return cls(q, deltas, alphas, target_kind)

    @property
    def stage_deltas(self):
        """SNR improvement per stage, with ``inf`` for the clean final stage."""
        return self.deltas_db + (float("inf"),)


@dataclass
class StageTargets:
    """Noisy magnitude/phase and per-stage targets for one utterance (``T x 161``)."""

    noisy_mag: np.ndarray
    noisy_phase: np.ndarray
    stage_mags: list
    masks: list
    target_kind: str

    @property
    def frames(self):
        return self.noisy_mag.shape[0]


def _mag(x):
    if hasattr(x, "values"):
        return np.abs(x.values)
    return np.asarray(x, dtype=np.float64)


def iam(clean, noisy):
    """Ideal amplitude mask ``clip(|S| / |X|, 0, 1)``; cells with ``|X| == 0`` map to 0."""
    s, x = _mag(clean), _mag(noisy)
    if s.shape != x.shape:
        raise ValueError(f"clean {s.shape} and noisy {x.shape} spectra differ in shape")
    out = np.zeros_like(x)
    nz = x > 0
    out[nz] = np.minimum(s[nz], x[nz]) / x[nz]
    return np.clip(out, 0.0, 1.0)


def sa_loss(mask_est, noisy_mag, target_mag, weights=None):
    """Signal-approximation loss: mean of ``(target - noisy * mask)**2``."""
    mask_est = mask_est if isinstance(mask_est, Tensor) else Tensor(mask_est)
    dt = mask_est.dtype
    est = mask_est * Tensor(np.asarray(noisy_mag, dtype=dt))
    return mse_loss(est, Tensor(np.asarray(target_mag, dtype=dt)), weights)


def build_stage_targets(pair, plan):
    noisy = stft(pair.noisy)
    xm = noisy.magnitude
    mags = []
    for delta in plan.stage_deltas:
        if np.isinf(delta):
            mags.append(stft(pair.clean).magnitude)
        else:
            mags.append(stft(make_improved_mixture(pair, delta)).magnitude)
    masks = [iam(m, xm) for m in mags] if plan.target_kind == "iam" else None
    return StageTargets(xm, noisy.phase, mags, masks, plan.target_kind)


def loss_weights(frame_mask, n_bins):
    """Cell weights giving each utterance's mean over its real frames equal weight.

    ``frame_mask`` is ``B x T`` (1 for real frames). The returned
    ``B x T x 1`` weights sum to one over the real cells of the batch.
    """
    m = np.asarray(frame_mask, dtype=np.float64)
    per_utt = m.sum(axis=1, keepdims=True)
    w = m / (np.maximum(per_utt, 1.0) * n_bins * m.shape[0])
    return w[:, :, None]


def stage_loss(output, noisy_mag, target_mag, target_kind, weights=None):
    if target_kind == "iam":
        return sa_loss(output, noisy_mag, target_mag, weights)
    return mse_loss(output, Tensor(np.asarray(target_mag, dtype=output.dtype)), weights)


def total_loss(stage_outputs, targets, plan, frame_mask=None):
    """Alpha-weighted sum of per-stage losses.

    ``targets`` is a :class:`StageTargets` (possibly holding batched
    ``B x T x 161`` arrays). With ``frame_mask`` padded frames are excluded
    and every utterance contributes the mean over its own real cells.
    """
    if len(stage_outputs) != plan.q:
        raise ValueError(f"plan has {plan.q} stages but {len(stage_outputs)} outputs were given")
    if len(targets.stage_mags) != plan.q:
        raise ValueError(f"plan has {plan.q} stages but targets hold {len(targets.stage_mags)}")
    weights = None
    if frame_mask is not None:
        weights = loss_weights(frame_mask, targets.noisy_mag.shape[-1]).astype(stage_outputs[0].dtype)
    total = None
    for alpha, out, tgt in zip(plan.alphas, stage_outputs, targets.stage_mags):
        term = stage_loss(out, targets.noisy_mag, tgt, plan.target_kind, weights) * alpha
        total = term if total is None else total + term
    return total
