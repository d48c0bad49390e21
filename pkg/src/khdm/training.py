"""Adaptive deep-learning Hankel DMD training.

One epoch shuffles the training trajectories into fixed-size batches,
optimizes the autoencoder against the composite loss (reconstruction,
latent-dynamics, prediction, weight penalty), then re-evaluates the delay
count on a held batch with frozen weights and moves it by at most one if a
neighbouring count lowers the loss by more than the relative threshold.
"""

from __future__ import annotations

import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AveragingSpec, GradientTape, constant
from .autoencoder import Autoencoder, decode, encode, weight_penalty
from .data import worker_count
from .dmd import (
    build_hankel,
    fit_global,
    fit_local,
    reconstruct,
    select_block_columns,
    trajectory_block,
    window_columns,
)
from .envelope import read_blocks, write_blocks
from .errors import (
    ContractViolation,
    NumericalError,
    TrainingAbortedError,
    TuningFailureError,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

ABORT_AFTER_BAD_EPOCHS = 3

# Reference hyperparameters per system (delay count and f_r picked by hand,
# batch size / weight penalty / learning rate from tuning).
SYSTEM_DEFAULTS = {
    "lorenz63": dict(n_ob_bar=10, f_r=0.05, e_tst=20, n_b=64, alpha=3.46e-12, gamma=5.07e-4, n_st=20, hidden=64),
    "rossler": dict(n_ob_bar=10, f_r=0.25, e_tst=40, n_b=256, alpha=2.52e-12, gamma=1e-4, n_st=20, hidden=64),
    "ks": dict(n_ob_bar=5, f_r=0.15, e_tst=10, n_b=64, alpha=4.85e-12, gamma=8.1e-4, n_st=14, hidden=128),
}


@dataclass
class TrainConfig:
    n_e: int
    n_c: int
    n_b: int
    alpha: float
    gamma: float
    f_r: float
    n_st: int
    n_ob_bar: int
    e_max: int
    e_tst: int = 10
    hidden: int = 64
    seed: int = 0
    n_test: int = 0
    rel_tol: float = ad.TRAINING_REL_TOL
    scope: str = "global"
    normalize: bool = True

    def __post_init__(self):
        if self.scope not in ("global", "local"):
            raise ContractViolation(f"scope must be global or local, got {self.scope!r}")

    def to_text(self):
        lines = []
        for key, value in vars(self).items():
            lines.append(f"train.{key}={value}")
        return "\n".join(lines) + "\n"


def config_for(system_name, n_e, n_c, e_max, **overrides):
    """TrainConfig seeded with the per-system reference hyperparameters."""
    if system_name not in SYSTEM_DEFAULTS:
        raise ContractViolation(f"no reference hyperparameters for {system_name!r}")
    params = dict(SYSTEM_DEFAULTS[system_name])
    params.update(overrides)
    return TrainConfig(n_e=n_e, n_c=n_c, e_max=e_max, **params)


@dataclass
class LossReport:
    l_recon: float
    l_pred: float
    l_dmd: float
    l_reg: float
    l_tot: float
    epoch: int
    split: str
    n_ob_bar: int

    def is_finite(self):
        return math.isfinite(self.l_tot)


@dataclass
class ComputedLoss:
    report: LossReport
    loss_node: object
    tape: object
    wrapped: object


def _dmd_losses_global(latent, n_traj, n_ob_bar, n_st, rel_tol):
    stack = build_hankel(latent, n_traj, n_ob_bar)
    n_cmp = stack.n_w - 1 - n_st
    if n_cmp < 1:
        raise ContractViolation(
            f"window length {stack.n_w} leaves no comparison columns past n_st={n_st}"
        )
    targets = window_columns(latent, n_traj, stack.n_w)
    fit = fit_global(stack, targets, rel_tol)
    predicted = reconstruct(fit, stack, n_st)
    pred_cmp = select_block_columns(predicted, n_traj, 0, n_cmp)
    latent_truth = select_block_columns(latent, n_traj, n_st, n_cmp)
    return pred_cmp, latent_truth, n_cmp


def _dmd_losses_local(latent, n_traj, n_ob_bar, n_st, rel_tol):
    preds, truths = [], []
    n_cmp = None
    for k in range(n_traj):
        block = trajectory_block(latent, n_traj, k)
        stack = build_hankel(block, 1, n_ob_bar)
        n_cmp = stack.n_w - 1 - n_st
        if n_cmp < 1:
            raise ContractViolation(
                f"window length {stack.n_w} leaves no comparison columns past n_st={n_st}"
            )
        targets = window_columns(block, 1, stack.n_w)
        fit = fit_local(stack, targets, rel_tol)
        predicted = reconstruct(fit, stack, n_st)
        preds.append(select_block_columns(predicted, 1, 0, n_cmp))
        truths.append(select_block_columns(block, 1, n_st, n_cmp))
    return preds, truths, n_cmp


def _scalar_mean(nodes):
    total = None
    for node in nodes:
        total = node if total is None else ad.add(total, node)
    return ad.scale(total, 1.0 / len(nodes))


def compute_losses(model, batch_flat, n_traj, config, n_ob_bar, with_grad, epoch=0, split="train"):
    """Composite loss over one flat trajectory batch.

    Returns the scalar tape node (for the backward pass) alongside the
    numeric report; with ``with_grad`` off, all parameters are constants and
    nothing is recorded.
    """
    batch_flat = np.asarray(batch_flat, dtype=np.float64)
    n_columns = batch_flat.shape[1] // n_traj
    tape = GradientTape() if with_grad else None
    wrapped = model.wrap(tape)
    y = constant(batch_flat)
    latent = encode(wrapped, y)
    if not np.all(np.isfinite(latent.values)):
        raise NumericalError("non-finite activations in encoder")
    decoded = decode(wrapped, latent)
    l_recon = ad.reduce_loss(
        [(ad.subtract(y, decoded), AveragingSpec(1, n_columns, n_traj))]
    )

    if config.scope == "global":
        pred_cmp, latent_truth, n_cmp = _dmd_losses_global(
            latent, n_traj, n_ob_bar, config.n_st, config.rel_tol
        )
        avg = AveragingSpec(config.n_st + 1, config.n_st + n_cmp, n_traj)
        l_dmd = ad.reduce_loss([(ad.subtract(latent_truth, pred_cmp), avg)])
        decoded_pred = decode(wrapped, pred_cmp)
        y_truth = select_block_columns(y, n_traj, config.n_st, n_cmp)
        l_pred = ad.reduce_loss([(ad.subtract(y_truth, decoded_pred), avg)])
    else:
        preds, truths, n_cmp = _dmd_losses_local(
            latent, n_traj, n_ob_bar, config.n_st, config.rel_tol
        )
        l_dmd = _scalar_mean(
            [ad.mean_column_norms(ad.subtract(t, p)) for p, t in zip(preds, truths)]
        )
        pred_terms = []
        for k, p in enumerate(preds):
            decoded_k = decode(wrapped, p)
            y_k = constant(
                batch_flat[:, k * n_columns + config.n_st : k * n_columns + config.n_st + n_cmp]
            )
            pred_terms.append(ad.mean_column_norms(ad.subtract(y_k, decoded_k)))
        l_pred = _scalar_mean(pred_terms)

    l_reg = weight_penalty(wrapped)
    l_tot = ad.add(ad.add(l_recon, l_pred), ad.add(l_dmd, ad.scale(l_reg, config.alpha)))
    report = LossReport(
        l_recon=l_recon.item(),
        l_pred=l_pred.item(),
        l_dmd=l_dmd.item(),
        l_reg=l_reg.item(),
        l_tot=l_tot.item(),
        epoch=epoch,
        split=split,
        n_ob_bar=n_ob_bar,
    )
    return ComputedLoss(report=report, loss_node=l_tot, tape=tape, wrapped=wrapped)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    skipped: int = 0

    @classmethod
    def init(cls, model):
        return cls(
            m=[np.zeros_like(p) for p in model.parameters()],
            v=[np.zeros_like(p) for p in model.parameters()],
        )


def adam_step(model, grads, lr, state, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Bias-corrected first/second-moment update, in place.

    A non-finite gradient skips the parameter update (moments still decay)
    and bumps the skip counter instead of poisoning the weights.
    """
    params = model.parameters()
    if len(grads) != len(params):
        raise ContractViolation(f"got {len(grads)} gradients for {len(params)} parameters")
    finite = all(np.all(np.isfinite(g)) for g in grads)
    if not finite:
        state.skipped += 1
        grads = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / (1.0 - beta1**t)
        v_hat = state.v[i] / (1.0 - beta2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    model.set_parameters(new_params)
    return state


# ---------------------------------------------------------------------------
# delay-count update
# ---------------------------------------------------------------------------


@dataclass
class DelayUpdate:
    """One epoch's delay-count scan: candidate losses and the outcome."""

    previous: int
    accepted: int
    evaluated: dict
    hit_ceiling: bool = False


def scan_candidates(evaluated, current, f_r):
    """Acceptance rule: scan n-1, n, n+1 in order against the running best.

    A candidate wins iff it lowers the best loss so far AND the relative
    change exceeds f_r; with f_r = inf nothing ever wins.  Candidates missing
    from ``evaluated`` were clipped out of range.
    """
    l_min = evaluated[current]
    best = current
    for n in (current - 1, current, current + 1):
        if n not in evaluated:
            continue
        l_n = evaluated[n]
        if l_n < l_min and abs(1.0 - l_n / l_min) > f_r:
            l_min = l_n
            best = n
    return best


def update_n_ob_bar(model, subset_flat, n_traj, config, current):
    """Scan {n-1, n, n+1} on held data with frozen weights.

    Candidates are clipped to [1, n_st] (a delay count at n_st leaves no
    forecast room, so hitting the ceiling is flagged for a larger f_r).
    """

    def evaluate(n):
        return compute_losses(
            model, subset_flat, n_traj, config, n, with_grad=False
        ).report.l_tot

    n_columns = np.asarray(subset_flat).shape[1] // n_traj
    ceiling = min(config.n_st, n_columns - 1 - config.n_st)
    evaluated = {current: evaluate(current)}
    for n in (current - 1, current + 1):
        if 1 <= n <= ceiling:
            evaluated[n] = evaluate(n)
    best = scan_candidates(evaluated, current, config.f_r)
    return DelayUpdate(
        previous=current,
        accepted=best,
        evaluated=evaluated,
        hit_ceiling=best >= ceiling,
    )


def replay_delay_updates(updates, initial, f_r):
    """Re-applies the acceptance rule to logged candidate losses."""
    n = initial
    for upd in updates:
        n = scan_candidates(upd.evaluated, n, f_r)
    return n


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _normalized_view(dataset, model):
    from .data import Dataset, Trajectory

    return Dataset(
        trajectories=[
            Trajectory(values=model.normalize(t.values), dt=t.dt, t0=t.t0)
            for t in dataset.trajectories
        ],
        system=dataset.system,
        seed=dataset.seed,
    )


@dataclass
class TrainResult:
    model: Autoencoder
    config: TrainConfig
    train_reports: list
    test_reports: list
    n_ob_history: list  # (epoch, n_ob_bar) pairs
    delay_updates: list
    adam: AdamState = field(repr=False, default=None)

    @property
    def final_n_ob_bar(self):
        return self.n_ob_history[-1][1]


def _mean_report(reports, epoch, split, n_ob_bar):
    return LossReport(
        l_recon=float(np.mean([r.l_recon for r in reports])),
        l_pred=float(np.mean([r.l_pred for r in reports])),
        l_dmd=float(np.mean([r.l_dmd for r in reports])),
        l_reg=float(np.mean([r.l_reg for r in reports])),
        l_tot=float(np.mean([r.l_tot for r in reports])),
        epoch=epoch,
        split=split,
        n_ob_bar=n_ob_bar,
    )


def train(config, dataset, progress=None):
    """Run the full epoch loop and return the trained model plus histories.

    The dataset's first ``n_c`` trajectories train, the next ``n_test`` are
    the held-out test split evaluated with frozen weights each epoch.  Three
    consecutive epochs of non-finite training loss abort the run with the
    history intact.
    """
    if config.n_b < 1 or config.n_c < config.n_b:
        raise ContractViolation(
            f"batch size {config.n_b} does not fit into {config.n_c} training trajectories"
        )
    needed = config.n_c + config.n_test
    if dataset.n_traj < needed:
        raise ContractViolation(
            f"dataset has {dataset.n_traj} trajectories; config needs {needed}"
        )
    train_ids = list(range(config.n_c))
    test_ids = list(range(config.n_c, config.n_c + config.n_test))

    model = Autoencoder.init(dataset.state_dim, config.n_e, config.hidden, config.seed)
    if config.normalize:
        # standardize per dimension on the training split; losses are then
        # measured in units of each dimension's spread
        flat = dataset.stacked(train_ids)
        shift = flat.mean(axis=1, keepdims=True)
        scale = np.maximum(flat.std(axis=1, keepdims=True), 1e-12)
        model.set_normalization(shift, scale)
        dataset = _normalized_view(dataset, model)
    test_flat = dataset.stacked(test_ids) if test_ids else None
    adam = AdamState.init(model)
    rng = np.random.default_rng([config.seed, 0xBA7C4])
    n_ob = config.n_ob_bar
    train_reports, test_reports = [], []
    n_ob_history = [(0, n_ob)]
    delay_updates = []
    bad_streak = 0

    n_batches = config.n_c // config.n_b
    for epoch in range(1, config.e_max + 1):
        perm = rng.permutation(config.n_c)
        batches = [
            [train_ids[i] for i in perm[b * config.n_b : (b + 1) * config.n_b]]
            for b in range(n_batches)
        ]
        batch_reports = []
        for batch_ids in batches:
            flat = dataset.stacked(batch_ids)
            try:
                computed = compute_losses(
                    model, flat, config.n_b, config, n_ob, with_grad=True,
                    epoch=epoch, split="train",
                )
            except NumericalError:
                batch_reports.append(
                    LossReport(np.nan, np.nan, np.nan, np.nan, np.nan, epoch, "train", n_ob)
                )
                continue
            grads = computed.tape.gradient(
                computed.loss_node, computed.wrapped.parameters()
            )
            adam_step(model, grads, config.gamma, adam)
            batch_reports.append(computed.report)

        epoch_report = _mean_report(batch_reports, epoch, "train", n_ob)
        train_reports.append(epoch_report)

        # delay-count update on the first shuffled batch, weights frozen
        if math.isfinite(config.f_r):
            update = update_n_ob_bar(
                model, dataset.stacked(batches[0]), config.n_b, config, n_ob
            )
            delay_updates.append(update)
            n_ob = update.accepted
            if update.hit_ceiling:
                warnings.warn(
                    f"delay count reached its ceiling ({n_ob}) at epoch {epoch}; "
                    "the model is losing forecast room, consider a larger f_r",
                    RuntimeWarning,
                    stacklevel=2,
                )
        n_ob_history.append((epoch, n_ob))

        if test_flat is not None:
            try:
                test_report = compute_losses(
                    model, test_flat, config.n_test, config, n_ob,
                    with_grad=False, epoch=epoch, split="test",
                ).report
            except NumericalError:
                test_report = LossReport(
                    np.nan, np.nan, np.nan, np.nan, np.nan, epoch, "test", n_ob
                )
            test_reports.append(test_report)

        if progress is not None:
            progress(epoch, epoch_report, test_reports[-1] if test_reports else None, n_ob)

        bad_streak = bad_streak + 1 if not epoch_report.is_finite() else 0
        if bad_streak >= ABORT_AFTER_BAD_EPOCHS:
            raise TrainingAbortedError(
                f"training loss non-finite for {bad_streak} consecutive epochs",
                history=train_reports,
            )

    return TrainResult(
        model=model,
        config=config,
        train_reports=train_reports,
        test_reports=test_reports,
        n_ob_history=n_ob_history,
        delay_updates=delay_updates,
        adam=adam,
    )


# ---------------------------------------------------------------------------
# random-search tuner
# ---------------------------------------------------------------------------

BATCH_CHOICES = (64, 128, 256)
ALPHA_RANGE = (-12.0, -8.0)  # log10
GAMMA_RANGE = (-5.0, -2.0)


def sample_trial_config(base, rng, trial_seed, batch_choices=BATCH_CHOICES):
    return replace(
        base,
        n_b=int(rng.choice(batch_choices)),
        alpha=float(10.0 ** rng.uniform(*ALPHA_RANGE)),
        gamma=float(10.0 ** rng.uniform(*GAMMA_RANGE)),
        e_max=base.e_tst,
        seed=trial_seed,
    )


def tune(base_config, dataset, budget, seed=0, batch_choices=BATCH_CHOICES):
    """Random search over batch size, weight penalty, and learning rate.

    Each trial trains for ``e_tst`` epochs on its own seed; trials are ranked
    by final test loss.  Aborted or non-finite trials rank last; if every
    trial aborts the search fails.
    """
    if budget < 1:
        raise ContractViolation("tuning budget must be at least 1")
    rng = np.random.default_rng(seed)
    configs = [
        sample_trial_config(base_config, rng, int(1000 + i), batch_choices)
        for i in range(budget)
    ]

    def run(cfg):
        try:
            result = train(cfg, dataset)
        except (TrainingAbortedError, NumericalError, ContractViolation):
            return math.inf
        final = result.test_reports[-1].l_tot if result.test_reports else math.inf
        return final if math.isfinite(final) else math.inf

    workers = min(worker_count(), budget)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            finals = list(pool.map(run, configs))
    else:
        finals = [run(cfg) for cfg in configs]
    if all(math.isinf(f) for f in finals):
        raise TuningFailureError("every tuning trial aborted or diverged")
    order = sorted(range(budget), key=lambda i: finals[i])
    return [(configs[i], finals[i]) for i in order]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _config_from_text(text):
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        key = key.strip().removeprefix("train.")
        values[key] = raw.strip()
    kwargs = {}
    for f_name, f_type in (
        ("n_e", int), ("n_c", int), ("n_b", int), ("alpha", float), ("gamma", float),
        ("f_r", float), ("n_st", int), ("n_ob_bar", int), ("e_max", int),
        ("e_tst", int), ("hidden", int), ("seed", int), ("n_test", int),
        ("rel_tol", float), ("scope", str),
    ):
        if f_name in values:
            kwargs[f_name] = f_type(values[f_name])
    if "normalize" in values:
        kwargs["normalize"] = values["normalize"].strip().lower() in ("1", "true", "yes")
    return TrainConfig(**kwargs)


def loss_history_csv(result):
    buf = io.StringIO()
    buf.write("epoch,split,l_recon,l_pred,l_dmd,l_reg,l_tot,n_ob_bar\n")
    for r in result.train_reports + result.test_reports:
        buf.write(
            f"{r.epoch},{r.split},{r.l_recon:.17g},{r.l_pred:.17g},"
            f"{r.l_dmd:.17g},{r.l_reg:.17g},{r.l_tot:.17g},{r.n_ob_bar}\n"
        )
    return buf.getvalue()


def save_checkpoint(path, result):
    model, adam = result.model, result.adam
    matrices = {}
    for i, (w, b) in enumerate(zip(model.enc_w, model.enc_b)):
        matrices[f"enc.w{i}"] = w
        matrices[f"enc.b{i}"] = b
    for i, (w, b) in enumerate(zip(model.dec_w, model.dec_b)):
        matrices[f"dec.w{i}"] = w
        matrices[f"dec.b{i}"] = b
    if adam is not None:
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            matrices[f"adam.m{i}"] = m
            matrices[f"adam.v{i}"] = v
    if model.input_shift is not None:
        matrices["norm.shift"] = model.input_shift
        matrices["norm.scale"] = model.input_scale
    texts = {
        "config": result.config.to_text(),
        "n_ob_history": "\n".join(f"{e},{n}" for e, n in result.n_ob_history),
        "adam_meta": f"step={result.adam.step if adam else 0},skipped={result.adam.skipped if adam else 0}",
        "losses": loss_history_csv(result),
    }
    write_blocks(path, matrices=matrices, texts=texts)


def load_checkpoint(path):
    """Model, config, and delay history from a checkpoint envelope."""
    matrices, texts = read_blocks(path)
    config = _config_from_text(texts["config"])
    n_layers = len([k for k in matrices if k.startswith("enc.w")])
    model = Autoencoder(
        enc_w=[matrices[f"enc.w{i}"] for i in range(n_layers)],
        enc_b=[matrices[f"enc.b{i}"] for i in range(n_layers)],
        dec_w=[matrices[f"dec.w{i}"] for i in range(n_layers)],
        dec_b=[matrices[f"dec.b{i}"] for i in range(n_layers)],
    )
    if "norm.shift" in matrices:
        model.set_normalization(matrices["norm.shift"], matrices["norm.scale"])
    history = [
        (int(line.split(",")[0]), int(line.split(",")[1]))
        for line in texts["n_ob_history"].splitlines()
        if line.strip()
    ]
    return model, config, history
