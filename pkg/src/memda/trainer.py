"""The full training loop.

Each iteration runs one combined forward/backward pass over a source and a
target mini-batch, assembling

    total = l_sup + lambda_adv * l_adv + lambda_sc * l_sc

with the discriminator trained on l_d in the same pass: its own parameters
get the plain l_d gradient while the encoder/classifier side receives the
reversed, lambda_adv-scaled gradient through the conditioned input. The
consistency term stays inactive during the bootstrap phase and until the
memory bank holds enough entries; each network is updated exactly once per
iteration by momentum SGD with per-group inverse-decay learning rates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, metrics
from . import similarity as simmod
from .bank import MemoryBank, bank_ready, momentum_update
from .datasets import DomainDataset, batch_sampler
from .errors import ConfigurationError, NumericalError
from .nn import (
    ModelBundle,
    build_model,
    classifier_forward,
    discriminator_forward,
    encoder_forward,
    gradient_reversal,
    softmax_vjp,
)

KNN = "knn"
CLASSIFIER = "classifier"
MEMORY = "memory"
BATCH = "batch"
OFF = "off"
ALL_COMPONENTS = frozenset({"sup", "adv", "sc"})


@dataclass
class TrainConfig:
    batch_size: int = 32
    total_iters: int = 2000
    bootstrap_iters: int = 500
    lambda_adv: float = 1.0
    lambda_sc: float = 0.1
    tau: float = 0.07
    k: int = 5
    bank_capacity: int = 4096
    min_bank_entries: int = 0        # 0 means the 5*k default
    similarity: str = simmod.COSINE
    gaussian_sigma: float = 1.0
    pseudo_labels: str = KNN
    consistency: str = MEMORY        # memory | batch | off
    diagnostics: str = "auto"        # auto | on | off
    lr_encoder: float = 0.003
    lr_heads: float = 0.03
    lr_alpha: float = 10.0
    lr_beta: float = 0.75
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    mu: float = 0.0                  # slow-encoder momentum; 0 disables the copy
    adv_ramp: bool = False
    condition_backprop: str = "feature"  # feature | both: adversarial gradient
                                         # through f only, or through f and g
    seed: int = 0
    embed_dim: int = 32
    encoder_hidden: int = 64
    encoder_layers: int = 2
    disc_hidden: int = 64
    multilinear: bool = True

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 <= self.bootstrap_iters < self.total_iters:
            raise ConfigurationError("need 0 <= bootstrap_iters < total_iters")
        if self.lambda_adv < 0 or self.lambda_sc < 0:
            raise ConfigurationError("loss coefficients must be >= 0")
        if not self.tau > 0:
            raise ConfigurationError("tau must be > 0")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.bank_capacity < 1:
            raise ConfigurationError("bank_capacity must be >= 1")
        if min(self.lr_encoder, self.lr_heads) <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not 0 <= self.mu <= 1:
            raise ConfigurationError("mu must lie in [0, 1]")
        if self.pseudo_labels not in (KNN, CLASSIFIER):
            raise ConfigurationError(f"unknown pseudo-label mode {self.pseudo_labels!r}")
        if self.consistency not in (MEMORY, BATCH, OFF):
            raise ConfigurationError(f"unknown consistency mode {self.consistency!r}")
        if self.diagnostics not in ("auto", "on", "off"):
            raise ConfigurationError(f"unknown diagnostics mode {self.diagnostics!r}")
        if self.condition_backprop not in ("feature", "both"):
            raise ConfigurationError(
                f"unknown condition_backprop mode {self.condition_backprop!r}")
        simmod.SimilarityKind(self.similarity, self.gaussian_sigma)

    @property
    def gate_entries(self) -> int:
        """Bank fill needed before the consistency loss activates."""
        return max(self.k, self.min_bank_entries or 5 * self.k)

    @property
    def similarity_kind(self) -> simmod.SimilarityKind:
        return simmod.SimilarityKind(self.similarity, self.gaussian_sigma)

    def diagnostics_active(self) -> bool:
        if self.diagnostics == "on":
            return True
        if self.diagnostics == "off":
            return False
        return self.lambda_sc > 0 and self.consistency != OFF


@dataclass
class IterationRecord:
    iteration: int
    l_sup: float
    l_d: float
    l_adv: float
    l_sc: float
    total: float
    lr_encoder: float
    lr_heads: float
    bank_size: int
    mean_sim_avg: float
    mean_sim_literal: float
    pl_acc: float
    skip_count: int


class SGD:
    """Classical momentum SGD with L2 weight decay; velocity state persists."""

    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = list(params)
        self.velocities = [np.zeros_like(p) for p in self.params]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.steps = 0

    def step(self, grads, lr: float) -> None:
        for p, v, g in zip(self.params, self.velocities, grads):
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient in SGD update")
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p
            p -= lr * v
        self.steps += 1


def sgd_update(params, grads, lr: float, momentum: float = 0.0,
               weight_decay: float = 0.0, state: SGD | None = None) -> SGD:
    """One momentum-SGD step; pass ``state`` back in to keep velocities."""
    if state is None:
        state = SGD(params, momentum, weight_decay)
    state.step(grads, lr)
    return state


def lr_schedule(iteration: int, config: TrainConfig):
    """Inverse-decay rates: eta0 * (1 + alpha * p) ** (-beta), p = progress."""
    p = iteration / config.total_iters
    factor = (1.0 + config.lr_alpha * p) ** (-config.lr_beta)
    return config.lr_encoder * factor, config.lr_heads * factor


def adv_coefficient(iteration: int, config: TrainConfig) -> float:
    if not config.adv_ramp:
        return config.lambda_adv
    p = iteration / config.total_iters
    return config.lambda_adv * (2.0 / (1.0 + np.exp(-10.0 * p)) - 1.0)


@dataclass
class StepOutput:
    report: losses.LossReport
    f_source: np.ndarray
    f_target: np.ndarray
    g_target: np.ndarray
    consistency: losses.ConsistencyResult | None = None


def forward_backward(model: ModelBundle, x_source, y_source, x_target,
                     config: TrainConfig, bank: MemoryBank | None = None,
                     sc_active: bool = False, lambda_adv: float | None = None,
                     components: frozenset = ALL_COMPONENTS) -> StepOutput:
    """One combined pass; gradients accumulate into the model in place.

    ``sc_active`` enables the consistency branch (the trainer gates it on
    bootstrap and bank fill). ``components`` restricts which objective terms
    contribute, which the gradient-check harness uses to isolate one term at
    a time.
    """
    if lambda_adv is None:
        lambda_adv = config.lambda_adv
    kind = config.similarity_kind
    model.zero_grads()

    f_s, tape_es = encoder_forward(x_source, model.encoder)
    f_t, tape_et = encoder_forward(x_target, model.encoder)
    g_s, _, tape_cs = classifier_forward(f_s, model.classifier)
    g_t, _, tape_ct = classifier_forward(f_t, model.classifier)

    report = losses.LossReport()
    dprobs_s = np.zeros_like(g_s)
    dprobs_t = np.zeros_like(g_t)
    df_s = np.zeros_like(f_s)
    df_t = np.zeros_like(f_t)

    if "sup" in components:
        report.l_sup, dsup = losses.supervised_loss(g_s, y_source)
        dprobs_s += dsup

    if "adv" in components and lambda_adv > 0:
        if model.multilinear:
            h_s = losses.multilinear_map(f_s, g_s)
            h_t = losses.multilinear_map(f_t, g_t)
        else:
            h_s, h_t = f_s, f_t
        p_s, tape_gs = discriminator_forward(h_s, model.discriminator)
        p_t, tape_gt = discriminator_forward(h_t, model.discriminator)
        report.l_d, dps, dpt = losses.discriminator_loss(p_s, p_t)
        report.l_adv = -report.l_d
        # discriminator itself minimizes l_d ...
        dz_s = (dps * p_s * (1.0 - p_s))[:, None]
        dz_t = (dpt * p_t * (1.0 - p_t))[:, None]
        dh_s = model.discriminator.backward(tape_gs, dz_s)
        dh_t = model.discriminator.backward(tape_gt, dz_t)
        # ... while the encoder/classifier side sees the reversed gradient
        dh_s = gradient_reversal(dh_s, lambda_adv)
        dh_t = gradient_reversal(dh_t, lambda_adv)
        if model.multilinear:
            dfa_s, dga_s = losses.multilinear_map_vjp(f_s, g_s, dh_s)
            dfa_t, dga_t = losses.multilinear_map_vjp(f_t, g_t, dh_t)
            if config.condition_backprop == "both":
                # the conditioning vector g also carries adversarial gradient
                dprobs_s += dga_s
                dprobs_t += dga_t
            df_s += dfa_s
            df_t += dfa_t
        else:
            df_s += dh_s
            df_t += dh_t

    consistency = None
    if "sc" in components and sc_active and config.consistency != OFF:
        pseudo = None
        if config.pseudo_labels == CLASSIFIER:
            pseudo = np.argmax(g_t, axis=1)
        if config.consistency == MEMORY:
            consistency = losses.sample_consistency_memory(
                f_t, bank, config.tau, kind, config.k, model.num_classes,
                pseudo_labels=pseudo)
        else:
            consistency = losses.sample_consistency_batch(
                f_t, f_s.copy(), np.asarray(y_source), config.tau, kind,
                config.k, model.num_classes, pseudo_labels=pseudo)
        report.l_sc = consistency.value
        report.skipped_anchors = consistency.skipped
        if config.lambda_sc > 0:
            df_t += config.lambda_sc * consistency.grad_targets

    # chain classifier gradients (supervised + conditioning path) into features
    df_s += model.classifier.backward(tape_cs, softmax_vjp(g_s, dprobs_s))
    df_t += model.classifier.backward(tape_ct, softmax_vjp(g_t, dprobs_t))
    model.encoder.backward(tape_es, df_s)
    model.encoder.backward(tape_et, df_t)

    report.total = losses.total_loss(report.l_sup, report.l_adv, report.l_sc,
                                     lambda_adv, config.lambda_sc)
    report.per_anchor = (
        list(consistency.per_anchor) if consistency is not None else []
    )
    return StepOutput(report, f_s, f_t, g_t, consistency)


@dataclass
class TrainerState:
    model: ModelBundle
    bank: MemoryBank | None
    opt_encoder: SGD
    opt_heads: SGD
    last_good: IterationRecord | None = None


def init_state(config: TrainConfig, input_dim: int, num_classes: int) -> TrainerState:
    model = build_model(
        input_dim=input_dim,
        embed_dim=config.embed_dim,
        num_classes=num_classes,
        encoder_hidden=config.encoder_hidden,
        encoder_layers=config.encoder_layers,
        disc_hidden=config.disc_hidden,
        multilinear=config.multilinear,
        seed=config.seed,
    )
    bank = (MemoryBank(config.bank_capacity, config.embed_dim)
            if config.consistency == MEMORY else None)
    opt_encoder = SGD(model.encoder.parameters(), config.sgd_momentum,
                      config.weight_decay)
    opt_heads = SGD(model.head_parameters(), config.sgd_momentum,
                    config.weight_decay)
    return TrainerState(model, bank, opt_encoder, opt_heads)


def train_step(state: TrainerState, x_source, y_source, x_target, y_target_eval,
               iteration: int, config: TrainConfig) -> IterationRecord:
    """Run one iteration: losses, bank update, one SGD step per network.

    ``y_target_eval`` feeds the pseudo-label accuracy diagnostic only; pass
    None when target labels are unavailable.
    """
    if iteration >= config.total_iters:
        raise ConfigurationError("iteration past total_iters")
    model, bank = state.model, state.bank
    bootstrap = iteration < config.bootstrap_iters
    diag = config.diagnostics_active()
    want_sc = not bootstrap and config.consistency != OFF and (
        config.lambda_sc > 0 or diag)
    sc_active = want_sc and (
        config.consistency == BATCH
        or bank_ready(bank, config.gate_entries)
    )

    out = forward_backward(model, x_source, y_source, x_target, config,
                           bank=bank, sc_active=sc_active,
                           lambda_adv=adv_coefficient(iteration, config))
    report = out.report
    if not np.isfinite(report.total):
        raise NumericalError(
            f"non-finite loss at iteration {iteration}: "
            f"sup={report.l_sup} d={report.l_d} sc={report.l_sc}; "
            f"last good: {state.last_good}"
        )

    # slow encoder comes to life at the end of the bootstrap phase
    if config.mu > 0 and model.momentum is None and not bootstrap:
        model.momentum = model.encoder.clone()

    if want_sc and config.consistency == MEMORY:
        if config.mu > 0:
            bank_feats, _ = encoder_forward(x_source, model.momentum)
        else:
            bank_feats = out.f_source
        bank.enqueue(bank_feats, y_source)

    lr_enc, lr_heads = lr_schedule(iteration, config)
    state.opt_encoder.step(model.encoder.gradients(), lr_enc)
    state.opt_heads.step(model.head_gradients(), lr_heads)
    if model.momentum is not None:
        momentum_update(model.momentum, model.encoder, config.mu)

    mean_avg = mean_lit = pl_acc = 0.0
    if diag and out.consistency is not None:
        cons = out.consistency
        mean_avg, mean_lit = metrics.mean_similarity_both(
            cons.sim, cons.positive_mask)
        if y_target_eval is not None:
            pseudo = (cons.assignment.labels if cons.assignment is not None
                      else np.argmax(out.g_target, axis=1))
            pl_acc = metrics.pseudo_label_accuracy(pseudo, y_target_eval)

    record = IterationRecord(
        iteration=iteration,
        l_sup=report.l_sup,
        l_d=report.l_d,
        l_adv=report.l_adv,
        l_sc=report.l_sc if sc_active else 0.0,
        total=report.total,
        lr_encoder=lr_enc,
        lr_heads=lr_heads,
        bank_size=len(bank) if bank is not None else 0,
        mean_sim_avg=mean_avg,
        mean_sim_literal=mean_lit,
        pl_acc=pl_acc,
        skip_count=report.skipped_anchors,
    )
    state.last_good = record
    return record


def predict(model: ModelBundle, features) -> np.ndarray:
    f, _ = encoder_forward(features, model.encoder)
    probs, _, _ = classifier_forward(f, model.classifier)
    return np.argmax(probs, axis=1)


@dataclass
class RunResult:
    model: ModelBundle
    history: list
    evaluation: metrics.EvalReport
    bank: MemoryBank | None = None
    state: TrainerState | None = None


def run_training(config: TrainConfig, source: DomainDataset,
                 target: DomainDataset) -> RunResult:
    """Train on the given domain pair and evaluate on the full target set."""
    config.validate()
    if source.dim != target.dim:
        raise ConfigurationError("source/target feature widths differ")
    if source.num_classes != target.num_classes:
        raise ConfigurationError("source/target class counts differ")

    state = init_state(config, source.dim, source.num_classes)
    src_seed, tgt_seed = 2 * config.seed, 2 * config.seed + 1
    target_eval = target.eval_labels()
    has_target_labels = bool((target_eval >= 0).any())

    history = []
    for it in range(config.total_iters):
        src_idx = batch_sampler(source, config.batch_size, src_seed, it)
        tgt_idx = batch_sampler(target, config.batch_size, tgt_seed, it)
        record = train_step(
            state,
            source.features[src_idx],
            source.train_labels[src_idx],
            target.features[tgt_idx],
            target_eval[tgt_idx] if has_target_labels else None,
            it,
            config,
        )
        history.append(record)

    preds = predict(state.model, target.features)
    if has_target_labels:
        labeled = target_eval >= 0
        overall = metrics.accuracy(preds[labeled], target_eval[labeled])
        per_class = metrics.per_class_accuracy(
            preds[labeled], target_eval[labeled], target.num_classes)
    else:
        overall = float("nan")
        per_class = np.full(target.num_classes, np.nan)
    last = history[-1]
    evaluation = metrics.EvalReport(
        overall_accuracy=overall,
        per_class_accuracy=per_class,
        mean_similarity=last.mean_sim_avg,
        pseudo_label_accuracy=last.pl_acc,
        iteration=config.total_iters,
    )
    return RunResult(state.model, history, evaluation, state.bank, state)
