"""Adam, the plateau learning-rate schedule, padded minibatches and the training loop."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .mixer import sdr
from .model import enhance_stages, forward, save_checkpoint
from .seeding import stream
from .targets import StagePlan, StageTargets, build_stage_targets, total_loss
from .tensor import no_grad, zero_grad

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    pass


class NonFiniteGradientError(NumericalAbort):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name}")
        self.param = name


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    batch: int = 16
    max_epochs: int = 100
    halve_after: int = 3
    stop_after: int = 10
    seed: int = 0
    plan: StagePlan = field(default_factory=lambda: StagePlan.standard(3))
    width_scale: float = 1.0
    clip_norm: float | None = 5.0
    compare_to: str = "previous"  # or "best"
    sdr_eval_n: int = 20

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        for name in ("batch", "max_epochs", "halve_after", "stop_after"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.compare_to not in ("previous", "best"):
            raise ValueError("compare_to must be 'previous' or 'best'")


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(name)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class PlateauSchedule:
    """Learning-rate halving and early stopping driven by eval-loss increases.

    An increase is an eval loss strictly above the previous epoch's (or
    the best so far, with ``compare_to="best"``). Each increase bumps a
    consecutive counter, which resets on any non-increase, and a
    cumulative counter that never resets. The rate halves when the
    consecutive counter reaches ``halve_after`` (the counter then
    restarts); training stops once the cumulative counter exceeds
    ``stop_after``.
    """

    def __init__(self, lr0, halve_after=3, stop_after=10, compare_to="previous"):
        self.lr0 = lr0
        self.lr = lr0
        self.halve_after = halve_after
        self.stop_after = stop_after
        self.compare_to = compare_to
        self.consecutive = 0
        self.cumulative = 0
        self.halvings = 0
        self.prev = None
        self.best = None
        self.stopped = False

    def update(self, eval_loss):
        ref = self.prev if self.compare_to == "previous" else self.best
        if ref is not None and eval_loss > ref:
            self.consecutive += 1
            self.cumulative += 1
        else:
            self.consecutive = 0
        if self.consecutive >= self.halve_after:
            self.halvings += 1
            self.lr = self.lr0 * 2.0 ** (-self.halvings)
            self.consecutive = 0
        self.prev = eval_loss
        self.best = eval_loss if self.best is None else min(self.best, eval_loss)
        if self.cumulative > self.stop_after:
            self.stopped = True
        return self.stopped


def trace_schedule(eval_losses, lr0=1e-3, halve_after=3, stop_after=10, max_epochs=100, compare_to="previous"):
    """Replay the schedule over a loss sequence.

    Returns ``(lrs, stop_epoch)`` where ``lrs[e-1]`` is the rate used in
    epoch ``e`` (1-based) and ``stop_epoch`` is the last epoch run.
    """
    sched = PlateauSchedule(lr0, halve_after, stop_after, compare_to)
    lrs = []
    for epoch, loss in enumerate(eval_losses, start=1):
        lrs.append(sched.lr)
        if sched.update(loss) or epoch == max_epochs:
            return lrs, epoch
    return lrs, len(lrs)


@dataclass
class Batch:
    targets: StageTargets
    frame_mask: np.ndarray
    indices: list

    @property
    def size(self):
        return len(self.indices)


def collate(items, indices, target_kind):
    chosen = [items[i] for i in indices]
    n_bins = chosen[0].noisy_mag.shape[1]
    t_max = max(it.frames for it in chosen)
    q = len(chosen[0].stage_mags)
    B = len(chosen)
    noisy = np.zeros((B, t_max, n_bins))
    stages = [np.zeros((B, t_max, n_bins)) for _ in range(q)]
    mask = np.zeros((B, t_max))
    for b, it in enumerate(chosen):
        n = it.frames
        noisy[b, :n] = it.noisy_mag
        for s in range(q):
            stages[s][b, :n] = it.stage_mags[s]
        mask[b, :n] = 1.0
    return Batch(StageTargets(noisy, None, stages, None, target_kind), mask, list(indices))


def make_batches(items, batch=16, rng=None, target_kind="tms"):
    """Yield zero-padded batches; ``rng`` shuffles the order, ``None`` keeps it."""
    if not items:
        raise ValueError("empty corpus")
    order = np.arange(len(items))
    if rng is not None:
        order = rng.permutation(len(items))
    for start in range(0, len(items), batch):
        yield collate(items, order[start:start + batch], target_kind)


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    best_eval: float = float("inf")
    best_epoch: int = 0
    consecutive: int = 0
    cumulative: int = 0
    initial_train_loss: float = float("nan")
    history: list = field(default_factory=list)
    stop_reason: str = ""
    optimizer: Adam | None = None


LOG_COLUMNS = ("epoch", "lr", "train_loss", "eval_loss", "consecutive", "cumulative")


def log_header(q):
    return "\t".join(LOG_COLUMNS + tuple(f"sdr_stage{s}" for s in range(1, q + 1)))


def _batch_loss(graph, batch, plan, mode):
    outs = forward(graph, batch.targets.noisy_mag, mode=mode, frame_mask=batch.frame_mask)
    return total_loss(outs, batch.targets, plan, batch.frame_mask)


def corpus_loss(graph, items, plan, batch=16, mode="eval"):
    """Mean per-utterance loss over ``items`` (no parameter updates)."""
    total, n = 0.0, 0
    with no_grad():
        for b in make_batches(items, batch, None, plan.target_kind):
            total += _batch_loss(graph, b, plan, mode).item() * b.size
            n += b.size
    return total / n


def stage_sdrs(graph, pairs):
    """Average SDR (dB) of each stage's resynthesis against the clean signal."""
    per_stage = np.zeros(graph.q)
    for p in pairs:
        signals, _ = enhance_stages(graph, p.noisy)
        per_stage += [sdr(p.clean, s) for s in signals]
    return per_stage / max(len(pairs), 1)


def train(graph, train_pairs, eval_pairs, cfg, log_file=None, checkpoint_path=None, restore_best=True):
    """Optimise ``graph`` on ``train_pairs``; returns the final :class:`TrainState`.

    ``log_file`` receives one tab-separated line per epoch under the
    header from :func:`log_header` (epoch 0 is the untrained model).
    """
    plan = graph.plan
    train_items = [build_stage_targets(p, plan) for p in train_pairs]
    eval_items = [build_stage_targets(p, plan) for p in eval_pairs]
    sdr_pairs = list(eval_pairs[:cfg.sdr_eval_n])
    named = dict(graph.named_parameters())
    params = list(named.values())
    opt = Adam(named)
    sched = PlateauSchedule(cfg.lr0, cfg.halve_after, cfg.stop_after, cfg.compare_to)
    shuffle = stream("shuffle", cfg.seed)
    state = TrainState(lr=cfg.lr0, optimizer=opt)
    best_arrays = None

    def emit(row):
        state.history.append(row)
        if log_file is not None:
            vals = [row[c] for c in LOG_COLUMNS] + list(row["sdr"])
            log_file.write("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in vals) + "\n")
            log_file.flush()

    if log_file is not None:
        log_file.write(log_header(graph.q) + "\n")
    state.initial_train_loss = corpus_loss(graph, train_items, plan, cfg.batch, mode="train")
    emit({"epoch": 0, "lr": cfg.lr0, "train_loss": state.initial_train_loss, "eval_loss": float("nan"),
          "consecutive": 0, "cumulative": 0, "sdr": [float("nan")] * graph.q})

    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        run_loss, n = 0.0, 0
        for bi, batch in enumerate(make_batches(train_items, cfg.batch, shuffle, plan.target_kind)):
            zero_grad(params)
            loss = _batch_loss(graph, batch, plan, "train")
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalAbort(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            if cfg.clip_norm is not None:
                clip_grad_norm(params, cfg.clip_norm)
            try:
                opt.step(lr)
            except NonFiniteGradientError as exc:
                raise NumericalAbort(f"epoch {epoch}, batch {bi}: {exc}") from exc
            run_loss += value * batch.size
            n += batch.size
        train_loss = run_loss / n
        eval_loss = corpus_loss(graph, eval_items, plan, cfg.batch, mode="eval")
        if not np.isfinite(eval_loss):
            raise NumericalAbort(f"non-finite eval loss at epoch {epoch}")
        sdrs = stage_sdrs(graph, sdr_pairs) if sdr_pairs else [float("nan")] * graph.q
        stop = sched.update(eval_loss)
        state.epoch, state.lr = epoch, sched.lr
        state.consecutive, state.cumulative = sched.consecutive, sched.cumulative
        if eval_loss < state.best_eval:
            state.best_eval, state.best_epoch = eval_loss, epoch
            best_arrays = {k: v.copy() for k, v in graph.state_arrays().items()}
            if checkpoint_path is not None:
                save_checkpoint(graph, checkpoint_path)
        emit({"epoch": epoch, "lr": lr, "train_loss": train_loss, "eval_loss": eval_loss,
              "consecutive": sched.consecutive, "cumulative": sched.cumulative, "sdr": [float(s) for s in sdrs]})
        log.info("epoch %d lr %.3g train %.5f eval %.5f", epoch, lr, train_loss, eval_loss)
        if stop:
            state.stop_reason = "early-stop"
            break
    else:
        state.stop_reason = "epoch-limit"

    if restore_best and best_arrays is not None:
        _restore(graph, best_arrays)
    return state


def _restore(graph, arrays):
    for name, t in graph.named_parameters():
        t.data = arrays[name].copy()
    for key, st in graph.bn.items():
        st.mean = arrays[f"{key}.running_mean"].copy()
        st.var = arrays[f"{key}.running_var"].copy()
